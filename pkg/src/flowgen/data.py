"""Dataset manifests and image file IO.

A manifest is JSON-Lines: a header object carrying version + provenance,
then one record per line.  Images live beside it as 8-bit PNGs referenced by
relative path.  Serialization is canonical (sorted keys, fixed separators)
so identical data always produces identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .util import ContractError, canonical_json, sha256_hex

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class CaptionRecord:
    id: str
    image: str                      # path relative to the manifest directory
    caption: str
    params: dict
    split: str
    size: tuple[int, int]           # (H, W)
    render_seed: int
    mismatched: bool = False        # ground-truth flag set by caption corruption
    boilerplate: bool = False       # caption had boilerplate injected
    similarity: float | None = None

    def __post_init__(self):
        if not self.id or not self.image:
            raise ContractError("record needs a non-empty id and image path")
        if self.split not in SPLITS:
            raise ContractError(f"record {self.id}: unknown split {self.split!r}")
        if self.similarity is not None and not (-1.0 <= self.similarity <= 1.0):
            raise ContractError(f"record {self.id}: similarity {self.similarity} outside [-1,1]")

    def to_json(self) -> dict:
        out = {
            "id": self.id, "image": self.image, "caption": self.caption,
            "params": self.params, "split": self.split, "size": list(self.size),
            "render_seed": self.render_seed, "mismatched": self.mismatched,
            "boilerplate": self.boilerplate,
        }
        if self.similarity is not None:
            out["similarity"] = self.similarity
        return out

    @classmethod
    def from_json(cls, d: dict) -> "CaptionRecord":
        return cls(id=d["id"], image=d["image"], caption=d["caption"], params=d["params"],
                   split=d["split"], size=tuple(d["size"]), render_seed=d["render_seed"],
                   mismatched=d.get("mismatched", False),
                   boilerplate=d.get("boilerplate", False),
                   similarity=d.get("similarity"))


@dataclass
class DatasetManifest:
    provenance: dict
    records: list[CaptionRecord] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    root: Path | None = None        # directory the manifest was loaded from

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ContractError("manifest has duplicate record ids")

    def split(self, name: str) -> list[CaptionRecord]:
        if name not in SPLITS:
            raise ContractError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def by_id(self) -> dict[str, CaptionRecord]:
        return {r.id: r for r in self.records}

    def serialize(self) -> str:
        header = {"version": self.version, "provenance": self.provenance}
        lines = [canonical_json(header)]
        lines.extend(canonical_json(r.to_json()) for r in self.records)
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return sha256_hex(self.serialize().encode("utf-8"))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.serialize(), encoding="utf-8")
        self.root = path.parent
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ContractError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("version") != MANIFEST_VERSION:
            raise ContractError(f"{path}: unsupported manifest version {header.get('version')}")
        records = [CaptionRecord.from_json(json.loads(line)) for line in lines[1:] if line]
        return cls(provenance=header["provenance"], records=records, root=path.parent)

    def image_path(self, record: CaptionRecord) -> Path:
        if self.root is None:
            raise ContractError("manifest has no root directory; save or load it first")
        return self.root / record.image


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a [3,H,W] float image in [-1,1] as an 8-bit PNG."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"save_image: expected [3,H,W], got {image.shape}")
    if not np.isfinite(image).all():
        raise ContractError("save_image: non-finite pixels")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    u8 = np.clip((image.transpose(1, 2, 0) + 1.0) * 127.5, 0.0, 255.0)
    u8 = np.round(u8).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG back to [3,H,W] float32 in [-1,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / 127.5 - 1.0)


def resize_image(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of a [3,H,W] float image to side x side (deterministic)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"resize_image: expected [3,H,W], got {image.shape}")
    if image.shape[1] == side and image.shape[2] == side:
        return np.asarray(image, dtype=np.float32)
    chans = [np.asarray(
        Image.fromarray(np.asarray(c, dtype=np.float32), mode="F")
        .resize((side, side), Image.BILINEAR), dtype=np.float32)
        for c in image]
    return np.clip(np.stack(chans), -1.0, 1.0)


def load_split_images(manifest: DatasetManifest, split: str) -> tuple[list[CaptionRecord], np.ndarray]:
    """All records of one split plus their stacked images (requires equal sizes)."""
    records = manifest.split(split)
    if not records:
        raise ContractError(f"split {split!r} is empty")
    sizes = {r.size for r in records}
    if len(sizes) != 1:
        raise ContractError(f"split {split!r} mixes sizes {sorted(sizes)}; load by group instead")
    images = np.stack([load_image(manifest.image_path(r)) for r in records])
    return records, images
