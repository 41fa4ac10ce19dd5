from .errors import (
    CalibrationError,
    ConfigError,
    DataError,
    NumericError,
    ParseError,
    ShapeError,
    StorageError,
    UsageError,
)
from .config import TrainConfig, load_config
from .trainer import Trainer, train, evaluate
from .experiments import Comparison
from .processor import Processor
