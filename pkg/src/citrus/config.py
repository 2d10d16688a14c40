"""Run configuration shared by the driver, harnesses, and CLI."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

from .errors import ConfigError

POLICIES = ("cse", "tova", "h2o", "roco", "streaming")
LAYOUTS = ("standard", "individual", "shared")

# Paper-style defaults: chunk length 256 and per-layer budget 768, giving a
# working cache of 1,024 slots while a document is being encoded.
DEFAULT_CHUNK_LEN = 256
DEFAULT_BUDGET = 768


@dataclass
class RunConfig:
    """Everything one encode/generate experiment needs.

    ``window`` applies to the streaming policy only; when ``None`` it
    defaults to ``k - sink_size`` so that streaming retention fills the
    whole budget.
    """

    l_s: int = DEFAULT_CHUNK_LEN
    k: int = DEFAULT_BUDGET
    policy: str = "cse"
    layout: str = "standard"
    sink_size: int = 0
    window: int | None = None
    max_new_tokens: int = 64
    seed: int = 0
    raw_row_scores: bool = False

    def __post_init__(self):
        if self.l_s < 1:
            raise ConfigError(f"l_s must be >= 1, got {self.l_s}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.layout not in LAYOUTS:
            raise ConfigError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        if self.sink_size < 0:
            raise ConfigError("sink_size must be >= 0")
        if self.sink_size > self.k:
            raise ConfigError("sink_size cannot exceed the budget k")
        if self.window is not None:
            if self.window < 0:
                raise ConfigError("window must be >= 0")
            if self.sink_size + self.window > self.k:
                raise ConfigError("sink_size + window must not exceed k")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")

    @property
    def streaming_window(self) -> int:
        if self.window is not None:
            return self.window
        return self.k - self.sink_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = self.streaming_window if self.policy == "streaming" else self.window
        return d
