"""Model/training configuration and the flat key=value config format."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

VARIANT_DEPTHS = {"T": (2, 2, 2, 2), "S": (2, 2, 4, 2)}
VARIANT_EXTRA_VSS = {"T": 0, "S": 1}
DEFAULT_LADDER = (96, 192, 384, 768)


@dataclass
class ModelConfig:
    variant: str = "T"                      # T or S
    n_extra_vss: int | None = None          # None -> variant default (T: 0, S: 1)
    attention: str = "RMA"                  # RMA or RA
    channel_ladder: tuple = DEFAULT_LADDER
    stage_depths: tuple | None = None       # None -> variant default
    desk_divisor: int = 1                   # divides the ladder for desk-scale runs
    d_state: int = 16
    expand: int = 2
    ffn_ratio: int = 4

    def resolved(self) -> "ModelConfig":
        """Fill variant-dependent defaults and apply the desk divisor."""
        if self.variant not in VARIANT_DEPTHS:
            raise ValueError(f"unknown variant {self.variant!r}, expected T or S")
        if self.attention not in ("RMA", "RA"):
            raise ValueError(f"unknown attention mode {self.attention!r}, expected RMA or RA")
        if self.desk_divisor < 1:
            raise ValueError("desk_divisor must be >= 1")
        n_extra = self.n_extra_vss if self.n_extra_vss is not None else VARIANT_EXTRA_VSS[self.variant]
        depths = tuple(self.stage_depths) if self.stage_depths is not None else VARIANT_DEPTHS[self.variant]
        ladder = []
        for c in self.channel_ladder:
            if c % self.desk_divisor:
                raise ValueError(f"desk divisor {self.desk_divisor} does not divide channel count {c}")
            ladder.append(c // self.desk_divisor)
        return ModelConfig(variant=self.variant, n_extra_vss=n_extra, attention=self.attention,
                           channel_ladder=tuple(ladder), stage_depths=depths, desk_divisor=1,
                           d_state=self.d_state, expand=self.expand, ffn_ratio=self.ffn_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_ladder"] = list(self.channel_ladder)
        d["stage_depths"] = None if self.stage_depths is None else list(self.stage_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        if kw.get("channel_ladder") is not None:
            kw["channel_ladder"] = tuple(kw["channel_ladder"])
        if kw.get("stage_depths") is not None:
            kw["stage_depths"] = tuple(kw["stage_depths"])
        return cls(**kw)


def desk_model_config(variant="T", attention="RMA", n_extra_vss=None) -> ModelConfig:
    """Desk-scale preset: channel ladder divided by 8."""
    return ModelConfig(variant=variant, attention=attention, n_extra_vss=n_extra_vss,
                       desk_divisor=8)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    scheduler_factor: float = 0.1
    scheduler_patience: int = 5
    max_epochs: int = 500
    early_stop_patience: int = 50
    batch_size: int = 16
    image_size: int = 256
    seed: int = 0
    augment: bool = True
    rotate_deg: float = 15.0
    flip_prob: float = 0.5
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def __post_init__(self):
        if self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def desk_train_config(**overrides) -> TrainConfig:
    """Desk-scale training preset: small images, faster learning rate, no augmentation.

    The relaxed scheduler patience keeps the learning rate alive long enough
    to overfit tiny synthetic sets; the corpus-scale defaults above follow the
    published protocol instead.
    """
    base = dict(lr=1e-3, max_epochs=200, batch_size=8, image_size=64, augment=False,
                scheduler_patience=30)
    base.update(overrides)
    return TrainConfig(**base)


# --- flat key=value config files -------------------------------------------

_MODEL_KEYS = {
    "variant": str,
    "n_extra_vss": int,
    "attention": str,
    "ladder": "int_list",
    "depths": "int_list",
    "desk_divisor": int,
    "d_state": int,
    "expand": int,
    "ffn_ratio": int,
}
_TRAIN_KEYS = {
    "lr": float,
    "scheduler_factor": float,
    "scheduler_patience": int,
    "max_epochs": int,
    "early_stop_patience": int,
    "batch_size": int,
    "image_size": int,
    "seed": int,
    "augment": "bool",
    "rotate_deg": float,
    "flip_prob": float,
    "val_fraction": float,
    "test_fraction": float,
}
_MODEL_FIELD_BY_KEY = {"ladder": "channel_ladder", "depths": "stage_depths"}


def _coerce(key, raw, kind):
    try:
        if kind == "int_list":
            return tuple(int(v) for v in raw.split(","))
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as exc:
        raise ValueError(f"config key {key}: cannot parse value {raw!r}") from exc


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key in _MODEL_KEYS:
            model_kw[_MODEL_FIELD_BY_KEY.get(key, key)] = _coerce(key, raw, _MODEL_KEYS[key])
        elif key in _TRAIN_KEYS:
            train_kw[key] = _coerce(key, raw, _TRAIN_KEYS[key])
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def load_config_file(path) -> tuple[ModelConfig, TrainConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())
