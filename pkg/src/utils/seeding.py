"""
Seed management.

Each environment owns a counter-based Philox stream keyed by the run seed: the
env index sits in one counter word and a per-env draw counter in another, so a
reset or command resample for env i always sees the same random numbers no
matter how many envs are processed alongside it or in what order.
"""

import json
from typing import Any, Dict

import numpy as np


class EnvStreams:
    """Per-environment counter-based random streams."""

    def __init__(self, seed: int, num_envs: int, salt: int = 0):
        self.seed = int(seed)
        self.salt = int(salt)
        self.counters = np.zeros(num_envs, dtype=np.uint64)

    def generator(self, env_id: int) -> np.random.Generator:
        """Fresh generator for the next draw of env `env_id`; advances its counter."""
        draw = int(self.counters[env_id])
        self.counters[env_id] += np.uint64(1)
        # counter words: [block, draw, env, salt]; the lowest word is advanced by Philox itself
        bit_generator = np.random.Philox(key=self.seed, counter=[0, draw, int(env_id), self.salt])
        return np.random.Generator(bit_generator)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {"counters": self.counters.copy()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.counters = np.asarray(state["counters"], dtype=np.uint64).copy()


def controller_rng(seed: int, purpose: int) -> np.random.Generator:
    """Controller-side generator for one purpose (action noise, minibatch order...)."""
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, 1 << 32 | purpose]))


def generator_state(rng: np.random.Generator) -> str:
    """Bit-generator state as JSON text, for checkpoints."""
    return json.dumps(rng.bit_generator.state, default=_to_list)


def restore_generator(rng: np.random.Generator, text: str) -> None:
    rng.bit_generator.state = json.loads(text)


def _to_list(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")
