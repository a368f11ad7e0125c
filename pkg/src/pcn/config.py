"""Run configuration: defaults, flat ``key = value`` files and overrides.

Precedence is command-line flag > config file > default.
"""

from dataclasses import dataclass, fields

from .exceptions import ConfigurationError


def _floats(text):
    return [float(t) for t in str(text).replace(",", " ").split()]


def _ints(text):
    return [int(t) for t in str(text).replace(",", " ").split()]


def _bool(text):
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    seed: int = 0
    method: str = "pcn"

    # data generation
    n_classes: int = 20
    modes_per_class: int = 3
    ambient_dim: int = 16
    tail_exponent: float = 1.0
    head_count: int = 400
    mode_separation: float = 3.0
    noise_scale: float = 0.35
    warp: bool = True
    n_base: int = 15
    val_frac: float = 0.2

    # embedding network
    hidden_dims: list = (64, 64)
    emb_dim: int = 16

    # episodes
    n_way: int = 10
    n_support: int = 10
    n_query: int = 10
    episodes_per_epoch: int = 200
    tau_train: float = 1.0
    alpha: float = 0.5
    stop_grad_q: bool = False
    M_base: int = 10
    M_novel: int = 4

    # optimisation
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    patience: int = 10
    max_epochs: int = 100
    batch_size: int = 64
    batches_per_epoch: int = 50

    # low-shot evaluation
    n_train_shot: int = 5
    n_test_shot: int = 5
    folds: int = 10
    sweep: str = "none"
    shot_grid: list = (1, 2, 5, 10, 20)
    novel_grid: list = ()
    delta_tau_sweep: list = (-0.5, 0.0, 0.5, 1.0)
    alpha_list: list = (0.0, 0.5)
    knn_k: list = (1, 3)

    # paths
    dataset: str = ""
    checkpoint: str = ""
    pcn_checkpoint: str = ""
    out: str = ""
    out_dir: str = "."

    def __post_init__(self):
        self.hidden_dims = list(self.hidden_dims)
        self.shot_grid = list(self.shot_grid)
        self.novel_grid = list(self.novel_grid)
        self.delta_tau_sweep = list(self.delta_tau_sweep)
        self.alpha_list = list(self.alpha_list)
        self.knn_k = list(self.knn_k)

    @property
    def layer_dims(self):
        return [self.ambient_dim, *self.hidden_dims, self.emb_dim]

    def validate(self):
        if self.method not in ("pcn", "pn", "ce"):
            raise ConfigurationError(f"method must be pcn, pn or ce, got {self.method!r}")
        if self.tail_exponent <= 0:
            raise ConfigurationError(f"tail_exponent must be > 0, got {self.tail_exponent}")
        if not self.tau_train > 0:
            raise ConfigurationError("tau_train must be > 0")
        if not 0 <= self.alpha <= 1 or any(not 0 <= a <= 1 for a in self.alpha_list):
            raise ConfigurationError("alpha values must lie in [0, 1]")
        for name in ("n_way", "n_support", "n_query", "episodes_per_epoch", "M_base", "M_novel",
                     "folds", "n_train_shot", "n_test_shot", "emb_dim", "ambient_dim", "n_classes",
                     "head_count", "batch_size", "batches_per_epoch"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigurationError("max_epochs must be >= 1 and patience >= 0")
        if not 0 < self.n_base < self.n_classes:
            raise ConfigurationError("n_base must lie strictly between 0 and n_classes")
        if self.sweep not in ("none", "shot", "novel"):
            raise ConfigurationError(f"sweep must be none, shot or novel, got {self.sweep!r}")
        if any(d < 1 for d in self.hidden_dims):
            raise ConfigurationError("hidden_dims must be positive")
        return self


_PARSERS = {
    int: int,
    float: float,
    str: str,
    bool: _bool,
}
_LIST_PARSERS = {
    "hidden_dims": _ints,
    "shot_grid": _ints,
    "novel_grid": _ints,
    "knn_k": _ints,
    "delta_tau_sweep": _floats,
    "alpha_list": _floats,
}
FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key, text):
    if key not in FIELD_TYPES:
        raise ConfigurationError(f"unknown config key {key!r}")
    try:
        if key in _LIST_PARSERS:
            return _LIST_PARSERS[key](text)
        return _PARSERS[FIELD_TYPES[key]](text)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from exc


def read_config_file(path):
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        values[key.strip()] = parse_value(key.strip(), value.strip())
    return values


def build_config(file_path=None, overrides=None):
    values = read_config_file(file_path) if file_path else {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = parse_value(key, value) if isinstance(value, str) else value
    return RunConfig(**values).validate()


def dumps_config(cfg):
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
