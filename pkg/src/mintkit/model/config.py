from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..synthdocs.vocab import VOCAB_USED


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MiniModelConfig:
    """Architecture of the toy encoder-decoder.

    The defaults are the desk-scale model used throughout the pipeline; see
    :func:`donut_base_config` for the full-size configuration used only by the
    cost accountant.
    """

    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 8
    d_ff: int = 256
    vocab_size: int = 128
    grid_rows: int = 12
    grid_cols: int = 12
    max_prompt: int = 64
    tie_unembedding: bool = True
    encoder_attention: bool = False
    encoder_window: str = "row"  # "row": patches attend within their grid row; "full": all patches
    embed_init: str = "normal"  # or "orthogonal"

    @property
    def n_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self, *, check_vocab: bool = True) -> "MiniModelConfig":
        for f in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "grid_rows", "grid_cols", "max_prompt"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive, got {getattr(self, f)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if check_vocab and self.vocab_size < VOCAB_USED:
            raise ConfigError(f"vocab_size={self.vocab_size} cannot hold the {VOCAB_USED} special+glyph tokens")
        if self.encoder_window not in ("row", "full"):
            raise ConfigError(f"unknown encoder_window {self.encoder_window!r}")
        if self.embed_init not in ("normal", "orthogonal"):
            raise ConfigError(f"unknown embed_init {self.embed_init!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MiniModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def donut_base_config() -> MiniModelConfig:
    """Donut-base decoder dimensions (accounting only; 4800 encoder patches)."""
    return MiniModelConfig(
        d_model=1024, n_layers=4, n_heads=16, d_ff=4096, vocab_size=57525, grid_rows=60, grid_cols=80, max_prompt=1536
    )
