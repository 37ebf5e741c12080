import typing as T

MAX_CLASSES: int = 64
MAX_ORACLE_CLASSES: int = 16
MAX_SYNTHETIC_CLASSES: int = 8

# bit mask 0 marks pixels of a class outside the frame
UNKNOWN_LABEL: int = 0

DEFAULT_GAMMA: float = 0.8
DEFAULT_CALIBRATION_BINS: int = 10
DEFAULT_GAMMA_GRID: T.Tuple[float, ...] = tuple(
    round(0.5 + 0.05 * i, 2) for i in range(11)
)
DEFAULT_PROTOTYPES_PER_CLASS: int = 5
DEFAULT_BOUNDARY_WIDTH: int = 2
DEFAULT_NOISE_SIGMA: float = 0.08

NORMALIZATION_TOLERANCE: float = 1e-6
OWA_TOLERANCE: float = 1e-9
ACT_TIE_TOLERANCE: float = 1e-12

# RGB in [0, 1]; index k is the colour of class k in synthetic scenes
CLASS_COLORS: T.Tuple[T.Tuple[float, float, float], ...] = (
    (0.10, 0.10, 0.10),
    (0.90, 0.20, 0.20),
    (0.20, 0.80, 0.25),
    (0.20, 0.35, 0.90),
    (0.95, 0.85, 0.20),
    (0.80, 0.30, 0.85),
    (0.20, 0.85, 0.85),
    (0.95, 0.55, 0.15),
)
UNKNOWN_COLORS: T.Tuple[T.Tuple[float, float, float], ...] = (
    (0.60, 0.60, 0.60),
    (0.55, 0.35, 0.15),
    (0.95, 0.95, 0.95),
)

# mask visualization palette (8-bit RGB)
WRONG_ASSIGNMENT_RGB: T.Tuple[int, int, int] = (220, 30, 30)
MULTI_CLASS_RGB: T.Tuple[int, int, int] = (40, 200, 60)
OMEGA_RGB: T.Tuple[int, int, int] = (250, 150, 200)
UNLABELED_RGB: T.Tuple[int, int, int] = (0, 0, 0)
