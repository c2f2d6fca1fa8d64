"""Procedural retina-like phantoms with ground-truth attributes.

Each phantom is a deterministic function of (params, seed): a reddish
circular fundus field carrying a bright optic disc with an inner cup, a
darker macula opposite the disc, curved vessels radiating from the disc, and
bright lesion blobs.  Severity grade is a fixed function of lesion count, so
captions, pixels, and labels can never disagree on clean data.

Scene geometry lives in normalized coordinates where the short image side
spans [0, 1]; rectangular renders keep every structure inside the short
side's inscribed circle, which also makes left/right mirroring an exact
pixel flip.

The module also hosts the independent attribute detectors (disc centroid,
lesion blob counter) used to score generated images, and the manifest
builder / caption corruption tools.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import CaptionRecord, DatasetManifest, save_image
from .util import ContractError, canonical_json, config_hash, parallel_map, spawn_rng, stable_seed

GRADE_COUNT = 5

# palette in [0,1] space; the final image maps to [-1,1]
_VESSEL_RGB = np.array([0.45, 0.10, 0.10])
_DISC_RGB = np.array([0.98, 0.60, 0.30])
_CUP_RGB = np.array([1.00, 0.78, 0.42])
_LESION_RGB = np.array([0.75, 0.95, 0.25])

_FUNDUS_R = 0.48
_DISC_RX, _DISC_RY = 0.085, 0.105
_LESION_RADIUS = (0.060, 0.075)
_LESION_RING = (0.10, 0.34)
_LESION_MIN_DIST = 0.16
_LESION_DISC_CLEAR = 0.20

BOILERPLATE_PHRASES = (
    "please consult a specialist for further evaluation",
    "this description is not a medical diagnosis",
    "follow up imaging is recommended",
    "image quality is adequate for assessment",
)


def severity_of(lesion_count: int) -> int:
    return min(4, math.ceil(lesion_count / 2))


@dataclass(frozen=True)
class PhantomParams:
    disc_center: tuple[float, float]    # normalized (x, y), each in [0.1, 0.9]
    cup_to_disc: float                  # [0.2, 0.9]
    vessel_count: int                   # 2..8
    lesion_count: int                   # 0..8
    severity_grade: int                 # min(4, ceil(lesions/2))
    laterality: str                     # left | right
    background_tint: float              # [0, 1]

    def __post_init__(self):
        x, y = self.disc_center
        if not (0.1 <= x <= 0.9 and 0.1 <= y <= 0.9):
            raise ContractError(f"disc_center {self.disc_center} outside [0.1,0.9]^2")
        if not (0.2 <= self.cup_to_disc <= 0.9):
            raise ContractError(f"cup_to_disc {self.cup_to_disc} outside [0.2,0.9]")
        if not (2 <= self.vessel_count <= 8):
            raise ContractError(f"vessel_count {self.vessel_count} outside 2..8")
        if not (0 <= self.lesion_count <= 8):
            raise ContractError(f"lesion_count {self.lesion_count} outside 0..8")
        if self.severity_grade != severity_of(self.lesion_count):
            raise ContractError(
                f"severity_grade {self.severity_grade} != derived "
                f"{severity_of(self.lesion_count)} for {self.lesion_count} lesions")
        if self.laterality not in ("left", "right"):
            raise ContractError(f"laterality {self.laterality!r}")
        if self.laterality == "right" and x >= 0.5:
            raise ContractError("right eye requires the disc in the left half")
        if self.laterality == "left" and x <= 0.5:
            raise ContractError("left eye requires the disc in the right half")
        if not (0.0 <= self.background_tint <= 1.0):
            raise ContractError(f"background_tint {self.background_tint} outside [0,1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_center"] = list(self.disc_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        d = dict(d)
        d["disc_center"] = tuple(d["disc_center"])
        return cls(**d)


def sample_params(rng: np.random.Generator) -> PhantomParams:
    laterality = "right" if rng.uniform() < 0.5 else "left"
    offset = rng.uniform(0.08, 0.38)
    x = 0.5 - offset if laterality == "right" else 0.5 + offset
    y = rng.uniform(0.35, 0.65)
    lesions = int(rng.integers(0, 9))
    return PhantomParams(
        disc_center=(float(x), float(y)),
        cup_to_disc=float(rng.uniform(0.2, 0.9)),
        vessel_count=int(rng.integers(2, 9)),
        lesion_count=lesions,
        severity_grade=severity_of(lesions),
        laterality=laterality,
        background_tint=float(rng.uniform(0.0, 1.0)),
    )


# ------------------------------------------------------------------ rendering


@lru_cache(maxsize=8)
def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray, float]:
    s = min(h, w)
    v, u = np.meshgrid((np.arange(h) + 0.5) / s, (np.arange(w) + 0.5) / s, indexing="ij")
    return u, v, 1.0 / s


def _smooth(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _lesion_layout(rng: np.random.Generator, count: int,
                   disc: tuple[float, float]) -> list[tuple[float, float, float]]:
    """Seeded (dx, dy, radius) triples relative to the scene center."""
    placed: list[tuple[float, float, float]] = []
    min_dist = _LESION_MIN_DIST
    for _ in range(count):
        for attempt in range(200):
            r = rng.uniform(*_LESION_RING)
            phi = rng.uniform(0.0, 2.0 * math.pi)
            px, py = r * math.cos(phi), r * math.sin(phi)
            if math.hypot(px - (disc[0] - 0.5), py - (disc[1] - 0.5)) < _LESION_DISC_CLEAR:
                continue
            slack = min_dist * (0.9 ** (attempt // 50))
            if all(math.hypot(px - qx, py - qy) >= slack for qx, qy, _ in placed):
                placed.append((px, py, rng.uniform(*_LESION_RADIUS)))
                break
        else:
            placed.append((0.0, -0.38, rng.uniform(*_LESION_RADIUS)))
    return placed


def render_phantom(params: PhantomParams, resolution, seed: int = 0) -> np.ndarray:
    """Deterministic [3,H,W] float32 render in [-1,1].

    ``resolution`` is a side length in {32, 64} or an (H, W) pair whose long
    side is in {32, 64} and short side at least 70% of it (covers the mixed
    aspect ratios 64x48 and 48x64).  Left-eye renders are exact horizontal
    flips of the mirrored right-eye scene, so laterality never changes
    texture detail.
    """
    if isinstance(resolution, (tuple, list)):
        h, w = int(resolution[0]), int(resolution[1])
    else:
        h = w = int(resolution)
    if max(h, w) not in (32, 64) or min(h, w) < 0.7 * max(h, w):
        raise ContractError(f"unsupported render size {h}x{w}: long side must be "
                            "32 or 64, short side at least 70% of the long side")

    # canonical scene: disc in the left half; flip at the end for left eyes
    x, y = params.disc_center
    flip = params.laterality == "left"
    cx = 1.0 - x if flip else x

    rng = spawn_rng(seed, "phantom", f"{cx:.6f}", f"{y:.6f}", f"{params.cup_to_disc:.6f}",
                    params.vessel_count, params.lesion_count,
                    f"{params.background_tint:.6f}")

    u, v, px = _grid(h, w)
    center = np.array([w / (2 * min(h, w)), h / (2 * min(h, w))])
    du, dv = u - center[0], v - center[1]
    rr = np.sqrt(du * du + dv * dv)

    fundus = _smooth((_FUNDUS_R - rr) / (1.5 * px))
    shade = 1.0 - 0.35 * np.clip(rr / _FUNDUS_R, 0.0, 1.0) ** 2
    tint = params.background_tint
    img = np.stack([
        (0.72 + 0.12 * tint) * shade,
        (0.40 + 0.08 * tint) * shade,
        0.18 * shade,
    ])

    # macula: darker pool mirrored across the vertical axis from the disc
    mx, my = -(cx - 0.5), (y - 0.5)
    dm2 = (du - mx) ** 2 + (dv - my) ** 2
    img *= 1.0 - 0.5 * np.exp(-dm2 / (0.08 ** 2))

    # vessels radiate from the disc with a seeded bend
    dx, dy = cx - 0.5, y - 0.5
    alpha_v = np.zeros((h, w))
    n_ves = params.vessel_count
    for k in range(n_ves):
        ang = 2.0 * math.pi * (k + 0.35 + 0.3 * rng.uniform()) / n_ves
        bend = 1.2 * (rng.uniform() - 0.5)
        length = 0.30 + 0.12 * rng.uniform()
        width0 = 0.022 + 0.006 * rng.uniform()
        s = np.linspace(0.0, 1.0, 64)
        theta = ang + bend * s
        rad = 0.035 + s * length
        pts_x = dx + rad * np.cos(theta)
        pts_y = dy + rad * np.sin(theta)
        keep = np.sqrt(pts_x ** 2 + pts_y ** 2) < 0.46
        if not keep.any():
            continue
        widths = width0 * (1.0 - 0.55 * s[keep])
        d2 = (du[:, :, None] - pts_x[keep]) ** 2 + (dv[:, :, None] - pts_y[keep]) ** 2
        alpha_v = np.maximum(alpha_v, np.max(np.exp(-d2 / widths ** 2), axis=2))
    img = img * (1.0 - 0.85 * alpha_v) + _VESSEL_RGB[:, None, None] * (0.85 * alpha_v)

    # disc then cup
    f_disc = np.sqrt(((du - dx) / _DISC_RX) ** 2 + ((dv - dy) / _DISC_RY) ** 2)
    a_disc = _smooth((1.0 - f_disc) * _DISC_RX / (1.0 * px)) * 0.95
    img = img * (1.0 - a_disc) + _DISC_RGB[:, None, None] * a_disc
    cr = params.cup_to_disc
    f_cup = np.sqrt(((du - dx) / (_DISC_RX * cr)) ** 2 + ((dv - dy) / (_DISC_RY * cr)) ** 2)
    a_cup = _smooth((1.0 - f_cup) * _DISC_RX * cr / (1.0 * px)) * 0.9
    img = img * (1.0 - a_cup) + _CUP_RGB[:, None, None] * a_cup

    # lesions last so they stay bright over vessels and macula
    for lx, ly, lr in _lesion_layout(rng, params.lesion_count, (cx, y)):
        d = np.sqrt((du - lx) ** 2 + (dv - ly) ** 2)
        a = _smooth((lr - d) / (1.0 * px)) * 0.97
        img = img * (1.0 - a) + _LESION_RGB[:, None, None] * a

    img = img * fundus
    out = np.clip(img * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


# ------------------------------------------------------------------ captions


def _disc_word(x: float) -> str:
    return "nasal" if abs(x - 0.5) >= 0.2 else "central"


def _cup_word(ratio: float) -> str:
    if ratio < 0.45:
        return "mild"
    if ratio < 0.7:
        return "moderate"
    return "severe"


def caption_from_params(params: PhantomParams) -> str:
    n = params.lesion_count
    lesions = "no lesions" if n == 0 else ("1 lesion" if n == 1 else f"{n} lesions")
    return (f"{params.laterality} eye, optic disc {_disc_word(params.disc_center[0])}, "
            f"{_cup_word(params.cup_to_disc)} cupping, {params.vessel_count} vessels, "
            f"{lesions}, severity grade {params.severity_grade}")


def parse_caption(caption: str) -> dict:
    """Recover the discrete fields (laterality, vessel/lesion counts, grade)."""
    from .text import words_of
    toks = words_of(caption)
    if not toks or toks[0] not in ("left", "right"):
        raise ContractError(f"cannot parse laterality from {caption!r}")
    out = {"laterality": toks[0]}
    for i, tk in enumerate(toks):
        if tk in ("vessels", "vessel") and i > 0 and toks[i - 1].isdigit():
            out["vessel_count"] = int(toks[i - 1])
        if tk in ("lesions", "lesion") and i > 0:
            out["lesion_count"] = 0 if toks[i - 1] == "no" else (
                int(toks[i - 1]) if toks[i - 1].isdigit() else None)
        if tk == "grade" and i + 1 < len(toks) and toks[i + 1].isdigit():
            out["severity_grade"] = int(toks[i + 1])
    missing = [k for k in ("vessel_count", "lesion_count", "severity_grade")
               if out.get(k) is None]
    if missing:
        raise ContractError(f"cannot parse {missing} from {caption!r}")
    return out


def grammar_tokens() -> list[str]:
    """Every word the caption template can emit."""
    words = {"left", "right", "eye", "optic", "disc", "nasal", "central",
             "mild", "moderate", "severe", "cupping", "vessels", "vessel",
             "lesion", "lesions", "no", "severity", "grade"}
    words.update(str(i) for i in range(9))
    return sorted(words)


# ------------------------------------------------------------------ detectors


def lesion_count_oracle(image: np.ndarray) -> int:
    """Count bright yellow-green blobs, independent of the renderer's layout."""
    r, g = image[0], image[1]
    mask = (g > 0.72) & (r < 0.85)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return 0
    s = min(image.shape[1], image.shape[2])
    min_area = max(2, round(3 * (s / 32) ** 2))
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    return int((areas >= min_area).sum())


def disc_centroid_oracle(image: np.ndarray) -> tuple[float, float] | None:
    """Centroid of the brightest orange region in scene coordinates, or None."""
    r, g = image[0], image[1]
    mask = (r > 0.85) & (g < 0.62) & (g > -0.2)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return None
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    best = int(np.argmax(areas)) + 1
    cy, cx = ndimage.center_of_mass(mask, labels, best)
    s = min(image.shape[1], image.shape[2])
    return (float((cx + 0.5) / s), float((cy + 0.5) / s))


def laterality_oracle(image: np.ndarray) -> str | None:
    c = disc_centroid_oracle(image)
    if c is None:
        return None
    h, w = image.shape[1], image.shape[2]
    center_u = w / (2 * min(h, w))
    return "right" if c[0] < center_u else "left"


def read_attributes(image: np.ndarray) -> dict:
    lesions = lesion_count_oracle(image)
    return {"laterality": laterality_oracle(image), "lesion_count": lesions,
            "severity_grade": severity_of(lesions)}


# ------------------------------------------------------------------ manifests


def _largest_remainder(total: int, ratios: tuple[float, ...]) -> list[int]:
    raw = [total * r for r in ratios]
    base = [int(math.floor(x)) for x in raw]
    rem = total - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (raw[i] - base[i], -i), reverse=True)
    for i in order[:rem]:
        base[i] += 1
    return base


def stratified_split_labels(grades: list[int], ratios: tuple[float, ...]) -> list[str]:
    """Split assignment with global counts within +-1 of n*ratio and per-grade
    counts within +-1 of n_g*ratio (largest-remainder with column quotas)."""
    from .data import SPLITS
    n = len(grades)
    col_quota = _largest_remainder(n, ratios)
    uniq = sorted(set(grades))
    counts = {g: grades.count(g) for g in uniq}
    cell = {(g, s): int(math.floor(counts[g] * ratios[s])) for g in uniq for s in range(len(ratios))}
    col_rem = [col_quota[s] - sum(cell[(g, s)] for g in uniq) for s in range(len(ratios))]
    row_rem = {g: counts[g] - sum(cell[(g, s)] for s in range(len(ratios))) for g in uniq}
    frac = {(g, s): counts[g] * ratios[s] - cell[(g, s)] for g in uniq for s in range(len(ratios))}
    bumped: set[tuple[int, int]] = set()
    while sum(row_rem.values()) > 0:
        cands = [(g, s) for g in uniq for s in range(len(ratios))
                 if row_rem[g] > 0 and col_rem[s] > 0 and (g, s) not in bumped]
        if not cands:
            cands = [(g, s) for g in uniq for s in range(len(ratios))
                     if row_rem[g] > 0 and col_rem[s] > 0]
        g, s = max(cands, key=lambda gs: (frac[gs], -gs[0], -gs[1]))
        cell[(g, s)] += 1
        bumped.add((g, s))
        row_rem[g] -= 1
        col_rem[s] -= 1
    remaining = {g: [cell[(g, s)] for s in range(len(ratios))] for g in uniq}
    labels = []
    for g in grades:
        s = next(i for i, c in enumerate(remaining[g]) if c > 0)
        remaining[g][s] -= 1
        labels.append(SPLITS[s])
    return labels


def build_manifest(n: int, seed: int, out_dir: str | Path,
                   ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                   resolution: int = 32,
                   aspects: list[tuple[int, int]] | None = None,
                   aspect_fractions: list[float] | None = None) -> DatasetManifest:
    """Sample n phantoms, render them, and write manifest + PNGs."""
    if n < 10:
        raise ContractError(f"manifest needs n >= 10, got {n}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"split ratios {ratios} do not sum to 1")
    out_dir = Path(out_dir)
    rng = spawn_rng(seed, "manifest")
    params = [sample_params(rng) for _ in range(n)]

    if aspects:
        fr = aspect_fractions or [1.0 / len(aspects)] * len(aspects)
        if len(fr) != len(aspects) or abs(sum(fr) - 1.0) > 1e-9:
            raise ContractError("aspect fractions must match aspects and sum to 1")
        pick = rng.choice(len(aspects), size=n, p=fr)
        sizes = [tuple(aspects[i]) for i in pick]
    else:
        sizes = [(resolution, resolution)] * n

    labels = stratified_split_labels([p.severity_grade for p in params], tuple(ratios))
    provenance = {
        "seed": seed, "n": n, "ratios": list(ratios), "resolution": resolution,
        "aspects": [list(s) for s in (aspects or [])],
        "config_hash": config_hash({"n": n, "seed": seed, "ratios": list(ratios),
                                    "resolution": resolution,
                                    "aspects": [list(a) for a in (aspects or [])]}),
    }
    records = []
    for i, p in enumerate(params):
        rid = f"r{i:05d}"
        records.append(CaptionRecord(
            id=rid, image=f"images/{rid}.png", caption=caption_from_params(p),
            params=p.to_dict(), split=labels[i], size=sizes[i],
            render_seed=stable_seed(seed, "render", i)))
    manifest = DatasetManifest(provenance=provenance, records=records)

    def _render_one(rec: CaptionRecord) -> None:
        img = render_phantom(PhantomParams.from_dict(rec.params), rec.size, rec.render_seed)
        save_image(out_dir / rec.image, img)

    parallel_map(_render_one, records)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def corrupt_captions(manifest: DatasetManifest, fraction: float, seed: int,
                     out_path: str | Path | None = None) -> DatasetManifest:
    """Swap captions between records of different grades for a chosen fraction.

    Every affected record is flagged ``mismatched``; images are untouched.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ContractError(f"fraction {fraction} outside [0,1]")
    records = [CaptionRecord.from_json(r.to_json()) for r in manifest.records]
    n = len(records)
    if fraction > 0 and n < 2:
        raise ContractError("cannot corrupt a manifest with fewer than 2 records")
    k = round(fraction * n)
    if k == 0:
        # true identity: provenance untouched so the content hash is unchanged
        return DatasetManifest(provenance=dict(manifest.provenance),
                               records=records, root=manifest.root)
    if len({r.params["severity_grade"] for r in records}) < 2:
        raise ContractError("caption corruption needs at least two distinct grades")

    rng = spawn_rng(seed, "corrupt")
    if k > 0:
        chosen = sorted(rng.choice(n, size=k, replace=False).tolist())
        order = [chosen[i] for i in rng.permutation(k)]
        unpaired: list[int] = []
        while order:
            i = order.pop()
            j_idx = next((jj for jj, j in enumerate(order)
                          if records[j].params["severity_grade"]
                          != records[i].params["severity_grade"]), None)
            if j_idx is None:
                unpaired.append(i)
                continue
            j = order.pop(j_idx)
            records[i].caption, records[j].caption = records[j].caption, records[i].caption
            records[i].mismatched = records[j].mismatched = True
        for i in unpaired:
            donors = [r for r in records
                      if r.params["severity_grade"] != records[i].params["severity_grade"]]
            records[i].caption = donors[rng.integers(0, len(donors))].caption
            records[i].mismatched = True

    out = DatasetManifest(
        provenance={**manifest.provenance,
                    "corruption": {"fraction": fraction, "seed": seed}},
        records=records, root=manifest.root)
    if out_path is not None:
        out.save(out_path)
    return out


def inject_boilerplate(manifest: DatasetManifest, fraction: float, seed: int,
                       out_path: str | Path | None = None) -> DatasetManifest:
    """Append noise phrases to a fraction of captions (flagged ``boilerplate``)."""
    if not (0.0 <= fraction <= 1.0):
        raise ContractError(f"fraction {fraction} outside [0,1]")
    records = [CaptionRecord.from_json(r.to_json()) for r in manifest.records]
    rng = spawn_rng(seed, "boilerplate")
    k = round(fraction * len(records))
    if k == 0:
        return DatasetManifest(provenance=dict(manifest.provenance),
                               records=records, root=manifest.root)
    if k > 0:
        for i in sorted(rng.choice(len(records), size=k, replace=False).tolist()):
            count = 1 + int(rng.integers(0, 2))
            picks = rng.choice(len(BOILERPLATE_PHRASES), size=count, replace=False)
            extra = ", ".join(BOILERPLATE_PHRASES[p] for p in sorted(picks.tolist()))
            records[i].caption = f"{records[i].caption}, {extra}"
            records[i].boilerplate = True
    out = DatasetManifest(
        provenance={**manifest.provenance,
                    "boilerplate": {"fraction": fraction, "seed": seed}},
        records=records, root=manifest.root)
    if out_path is not None:
        out.save(out_path)
    return out
