"""Shared plumbing: error types, hashing, seeding, config files, small parallel map."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ContractError(ValueError):
    """A caller violated a documented precondition or invariant."""


class NonFiniteError(ContractError):
    """NaN or inf appeared where only finite values are allowed."""


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def config_hash(obj: Any) -> str:
    return sha256_hex(canonical_json(obj))


def file_hash(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stable_seed(*parts: int | str) -> int:
    """64-bit seed derived from the parts; stable across runs and platforms."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def spawn_rng(seed: int, *tags: int | str) -> np.random.Generator:
    """Named child generator.  Every random draw in the artifact flows through here,
    keyed by a base seed plus a textual path, so re-runs are bit-identical and
    subsystems never share streams."""
    material = hashlib.sha256("|".join([str(seed), *map(str, tags)]).encode("utf-8")).digest()
    words = [int.from_bytes(material[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def thread_count() -> int:
    """Worker cap for embarrassingly parallel per-record work (FLOWGEN_THREADS)."""
    env = os.environ.get("FLOWGEN_THREADS", "")
    if env.strip():
        try:
            n = int(env)
        except ValueError as e:
            raise ContractError(f"FLOWGEN_THREADS must be an integer, got {env!r}") from e
        if n < 1:
            raise ContractError(f"FLOWGEN_THREADS must be >= 1, got {n}")
        return n
    return min(8, os.cpu_count() or 1)


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map.  Results do not depend on the worker count because
    every fn call is pure in this codebase."""
    n = thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def load_config_file(path: str | os.PathLike) -> dict:
    """Read a TOML or JSON config file into a plain dict."""
    text = open(path, "rb").read()
    name = str(path)
    if name.endswith(".toml"):
        return tomllib.loads(text.decode("utf-8"))
    if name.endswith(".json"):
        return json.loads(text.decode("utf-8"))
    # sniff: TOML first, then JSON
    try:
        return tomllib.loads(text.decode("utf-8"))
    except Exception:
        try:
            return json.loads(text.decode("utf-8"))
        except Exception as e:
            raise ContractError(f"config file {name} is neither valid TOML nor JSON") from e


def ensure(cond: bool, message: str) -> None:
    if not cond:
        raise ContractError(message)
