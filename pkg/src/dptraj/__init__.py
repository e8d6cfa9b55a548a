"""Differentially private synthetic trajectory generation on a uniform grid."""

__version__ = "0.1.0"

from .accountant import PrivacyLedger, epsilon_for_delta, training_ledger  # noqa: E402
from .dpsgd import DpSgdConfig  # noqa: E402
from .generate import TraceGenerator, generate, most_probable_path  # noqa: E402
from .grid import GridSpec, NeighborhoodSpec, OccupiedCellIndex  # noqa: E402
from .metrics import evaluate  # noqa: E402
from .preprocess import Dataset, Trajectory, read_dataset, write_dataset  # noqa: E402
from .ti import TrajectoryInitializer  # noqa: E402
from .tpg import TransitionModel  # noqa: E402
