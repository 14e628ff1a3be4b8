"""Experiment configuration: a flat, diff-friendly key=value file format
with typed validation and seed-management invariants."""

from dataclasses import dataclass, fields

KEYPOINT_METHODS = ("permakey", "transporter")
ENCODERS = ("cnn", "gnn")


class ConfigError(ValueError):
    """Malformed or invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    env: str = "sprites"
    method: str = "permakey"
    k: int = 10
    layers: tuple = (0, 1)
    p: int = 2
    sigma: float = 0.1
    encoder: str = "cnn"
    distractor: bool = False
    n_enemies: int = 2  # moving sprites among the non-agent ones (0-2)

    # Dataset sizes (frames per split).
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200

    # Optimizer / schedule knobs shared by keypoint-module training.
    lr: float = 2e-4
    batch_size: int = 32
    epochs: int = 100
    patience: int = 10
    vae_max_steps: int = 0        # 0 = no cap
    lspn_steps: int = 2000
    pointnet_steps: int = 2000
    transporter_steps: int = 2000

    # Agent training.
    agent_steps: int = 100_000
    gamma: float = 0.99
    episode_len: int = 200  # environment steps per episode

    # Seed management. Validation/test environment seeds must not collide
    # with the training environment seed, so checkpoint selection and final
    # scores never reuse training layouts.
    data_seed: int = 0
    model_seed: int = 0
    train_env_seed: int = 0
    val_env_seed: int = 1
    test_env_seeds: tuple = (2, 3, 4, 5, 6, 7, 8, 9, 10, 11)

    def __post_init__(self):
        if self.method not in KEYPOINT_METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.k < 1:
            raise ConfigError("k must be positive")
        if self.p < 1:
            raise ConfigError("p must be positive")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if not 0 <= self.n_enemies <= 2:
            raise ConfigError("n_enemies must be between 0 and 2")
        self.layers = tuple(int(v) for v in self.layers)
        self.test_env_seeds = tuple(int(v) for v in self.test_env_seeds)
        if any(v < 0 or v > 3 for v in self.layers):
            raise ConfigError("layers must be encoder layer indices 0..3")
        if self.val_env_seed == self.train_env_seed:
            raise ConfigError("validation env seed equals training env seed")
        if self.train_env_seed in self.test_env_seeds:
            raise ConfigError("a test env seed equals the training env seed")
        if self.val_env_seed in self.test_env_seeds:
            raise ConfigError("a test env seed equals the validation env seed")
        if len(set(self.test_env_seeds)) != len(self.test_env_seeds):
            raise ConfigError("duplicate test env seeds")


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(text, kind):
    if kind is bool:
        if text not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text == "true"
    if kind is tuple:
        return tuple(int(v) for v in text.split(",")) if text else ()
    return kind(text)


def serialize_config(cfg: ExperimentConfig) -> str:
    """One `key = value` line per field, in declaration order."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}"
             for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    """Inverse of serialize_config. Unknown keys and type mismatches are
    errors; omitted keys take their defaults."""
    schema = {f.name: f for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, val = (part.strip() for part in line.partition("="))
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kind = schema[key].type
        kind = {"str": str, "int": int, "float": float, "bool": bool,
                "tuple": tuple}.get(kind, kind)
        try:
            values[key] = _parse_value(val, kind)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w") as fh:
        fh.write(serialize_config(cfg))
