"""Signal Temporal Logic: formula language, exact and smooth robustness, gradients."""
from .ast import (
    CHANNELS,
    SCENE_CONSTANTS,
    Abs,
    Always,
    And,
    BinOp,
    Channel,
    Const,
    Dist,
    Eventually,
    Formula,
    Implies,
    Interval,
    Neg,
    Norm,
    Not,
    Num,
    Or,
    Pred,
    TrueF,
    Until,
    conjunction,
    to_text,
)
from .parser import StlSyntaxError, UnknownChannelError, parse_formula
from .robustness import (
    EvaluationError,
    MissingChannelError,
    RobustnessConfig,
    robustness,
    robustness_and_grad,
    robustness_grad,
    robustness_trace,
)
from .signal import DistanceField, Signal

__all__ = [name for name in dir() if not name.startswith("_")]
