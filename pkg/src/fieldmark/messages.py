"""Watermark message registry.

Each watermark ID owns a fixed random bit string; the registry guarantees a
minimum pairwise Hamming distance so decoded messages identify their ID with
a margin.  Registries are generated once per model and travel inside the model
checkpoint, since bits and weights are only meaningful together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RegistryGenerationError(RuntimeError):
    """Raised when no message set satisfying the distance constraint is found."""


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return int((a != b).sum())


@dataclass(frozen=True)
class MessageRegistry:
    """Dense map from watermark IDs 0..N-1 to bit strings of equal length."""

    messages: np.ndarray  # (N, L) uint8 in {0, 1}
    min_distance: int

    def __post_init__(self):
        m = np.asarray(self.messages, dtype=np.uint8)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise ValueError(f"messages must be (N, L), got {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("messages must be binary")
        for i in range(m.shape[0]):
            for j in range(i + 1, m.shape[0]):
                d = hamming_distance(m[i], m[j])
                if d < self.min_distance:
                    raise ValueError(
                        f"messages {i} and {j} are {d} bits apart, below the "
                        f"required minimum of {self.min_distance}")
        object.__setattr__(self, "messages", m)

    @property
    def num_messages(self) -> int:
        return self.messages.shape[0]

    @property
    def num_bits(self) -> int:
        return self.messages.shape[1]

    def message_for(self, wm_id: int) -> np.ndarray:
        if not 0 <= wm_id < self.num_messages:
            raise ValueError(f"watermark id {wm_id} outside [0, {self.num_messages})")
        return self.messages[wm_id].copy()

    def best_match(self, bits: np.ndarray):
        """(id, bit agreement fraction) of the closest registered message."""
        bits = np.asarray(bits).reshape(1, -1)
        if bits.shape[1] != self.num_bits:
            raise ValueError(f"expected {self.num_bits} bits, got {bits.shape[1]}")
        agree = (self.messages == bits).mean(axis=1)
        best = int(agree.argmax())
        return best, float(agree[best])

    def to_manifest(self) -> dict:
        return {
            "messages": self.messages.astype(int).tolist(),
            "min_distance": int(self.min_distance),
        }

    @classmethod
    def from_manifest(cls, d: dict) -> "MessageRegistry":
        return cls(np.asarray(d["messages"], dtype=np.uint8), int(d["min_distance"]))


def generate_message_registry(
    num_messages: int,
    num_bits: int,
    min_distance: int,
    rng: np.random.Generator,
    max_draws: int | None = None,
) -> MessageRegistry:
    """Rejection-sample a message set with pairwise distance >= min_distance.

    Deterministic for a fixed generator state.  Raises RegistryGenerationError
    with the draw budget in the message when the constraint looks unsatisfiable.
    """
    if num_messages < 1 or num_bits < 1:
        raise ValueError("need at least one message and one bit")
    if min_distance < 0 or min_distance > num_bits:
        raise ValueError(f"min_distance must lie in [0, {num_bits}], got {min_distance}")
    if max_draws is None:
        max_draws = max(20_000, 2_000 * num_messages)
    accepted: list[np.ndarray] = []
    for _ in range(max_draws):
        cand = rng.integers(0, 2, size=num_bits, dtype=np.uint8)
        if all(hamming_distance(cand, m) >= min_distance for m in accepted):
            accepted.append(cand)
            if len(accepted) == num_messages:
                return MessageRegistry(np.stack(accepted), min_distance)
    raise RegistryGenerationError(
        f"could not place {num_messages} messages of {num_bits} bits at pairwise "
        f"distance >= {min_distance} within {max_draws} draws; relax the distance "
        f"or shorten the registry")
