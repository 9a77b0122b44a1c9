from enum import Enum


class Variant(str, Enum):
    MSFIN = "msfin"
    MSFIN_S = "msfin-s"


class ColorSpace(str, Enum):
    RGB = "rgb"
    YCBCR = "ycbcr"
    Y = "y"


class Ablation(str, Enum):
    # interaction schemes
    NO_IC = "no-ic"
    IC = "ic"
    CIC = "cic"
    IC_NS = "ic-ns"
    # RRCAB basic modules
    BASE = "base"
    CA = "ca"
    CA_CS = "ca-cs"
    CA_FF = "ca-ff"


class Recipe(str, Enum):
    OVERFIT = "overfit"


class Subcommand(str, Enum):
    TRAIN = "train"
    INFER = "infer"
    EVAL = "eval"
    PARAMS = "params"
    SELFTEST = "selftest"
