"""Caption-image alignment scoring, pair filtering, and caption refinement.

A small dual encoder (image tower + text tower, both projecting to a shared
unit sphere) is trained contrastively on clean pairs.  Cosine similarity of
the towers scores each record; records under a threshold are dropped and a
rule-based pass strips boilerplate phrases from the captions that survive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .data import DatasetManifest, load_image, resize_image
from .dit import extract_patches, grid_position_encoding
from .optim import Adam, clip_global_norm
from .phantom import BOILERPLATE_PHRASES
from .tensor import Tensor
from .text import MAX_LEN, TextEncoder, Vocabulary, tokenize, words_of
from .util import ContractError, canonical_json, sha256_hex, spawn_rng

D_JOINT = 64
IMAGE_SIDE = 32


class DualEncoder(nn.Module):
    """Image and text towers with unit-norm outputs and a learned temperature."""

    def __init__(self, rng: np.random.Generator, vocab: Vocabulary,
                 d_joint: int = D_JOINT, patch_size: int = 4,
                 image_side: int = IMAGE_SIDE, n_heads: int = 4):
        super().__init__()
        self.vocab = vocab
        self.d_joint = d_joint
        self.patch_size = patch_size
        self.image_side = image_side
        d = d_joint
        self.patch_embed = nn.Linear(rng, 3 * patch_size * patch_size, d)
        self.img_block1 = nn.EncoderBlock(rng, d, n_heads)
        self.img_block2 = nn.EncoderBlock(rng, d, n_heads)
        self.img_proj = nn.Linear(rng, d, d_joint)
        self.text_encoder = TextEncoder(rng, len(vocab), d_text=d, n_heads=n_heads,
                                        with_null=False)
        self.txt_proj = nn.Linear(rng, d, d_joint)
        self.log_scale = Tensor(np.array([np.log(10.0)], dtype=np.float32),
                                requires_grad=True)
        self.trained = False

    # -- towers ---------------------------------------------------------

    def embed_images(self, images: np.ndarray) -> Tensor:
        """[B,3,H,W] -> unit-norm [B, d_joint]; non-native sizes are resized."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ContractError(f"embed_images: expected [B,3,H,W], got {images.shape}")
        side = self.image_side
        if images.shape[2] != side or images.shape[3] != side:
            images = np.stack([resize_image(im, side) for im in images])
        b = images.shape[0]
        hp = side // self.patch_size
        raw = extract_patches(images, self.patch_size)
        x = self.patch_embed(Tensor(raw.reshape(b * hp * hp, -1)))
        x = T.reshape(x, (b, hp * hp, self.d_joint))
        pos = grid_position_encoding(hp, hp, self.d_joint).astype(np.float32)
        x = T.add(x, Tensor(pos))
        x = self.img_block1(x)
        x = self.img_block2(x)
        x = T.mean(x, axis=1)
        return nn.l2_normalize(self.img_proj(x))

    def embed_texts(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        enc = self.text_encoder.encode_tokens(ids, mask)
        pooled = nn.masked_mean_pool(enc, mask)
        return nn.l2_normalize(self.txt_proj(pooled))

    def embed_captions(self, captions: list[str]) -> Tensor:
        ids = np.stack([tokenize(c, self.vocab)[0] for c in captions])
        mask = np.stack([tokenize(c, self.vocab)[1] for c in captions])
        return self.embed_texts(ids, mask)

    # -- scoring --------------------------------------------------------

    def similarity(self, image: np.ndarray, caption: str) -> float:
        """Cosine similarity in [-1, 1] for one pair (pure function)."""
        if not self.trained:
            raise ContractError("dual encoder is untrained; train or load a checkpoint")
        with T.no_grad():
            ie = self.embed_images(image[None])
            te = self.embed_captions([caption])
            return float(np.dot(ie.data[0], te.data[0]))

    def score_manifest(self, manifest: DatasetManifest) -> np.ndarray:
        """Similarity for every record (per-record calls keep scores batch-invariant)."""
        if not self.trained:
            raise ContractError("dual encoder is untrained; train or load a checkpoint")
        out = np.empty(len(manifest.records), dtype=np.float64)
        for i, rec in enumerate(manifest.records):
            out[i] = self.similarity(load_image(manifest.image_path(rec)), rec.caption)
        return out

    def content_hash(self) -> str:
        parts = [f"{name}:{sha256_hex(p.data.tobytes())}"
                 for name, p in sorted(self.named_parameters().items())]
        return sha256_hex(canonical_json(parts).encode("utf-8"))


def contrastive_loss(img_emb: Tensor, txt_emb: Tensor, log_scale: Tensor) -> Tensor:
    """Symmetric in-batch InfoNCE; equals log(B) at uniform similarity."""
    b = img_emb.shape[0]
    sim = T.matmul(img_emb, T.transpose(txt_emb))
    t11 = T.reshape(T.exp(log_scale), (1, 1))
    scale_full = T.matmul(T.matmul(Tensor(np.ones((b, 1), np.float32)), t11),
                          Tensor(np.ones((1, b), np.float32)))
    logits = T.mul(sim, scale_full)
    eye = Tensor(np.eye(b, dtype=np.float32))
    l_i2t = T.scale(T.sum_(T.mul(T.log_softmax(logits), eye)), -1.0 / b)
    l_t2i = T.scale(T.sum_(T.mul(T.log_softmax(T.transpose(logits)), eye)), -1.0 / b)
    return T.scale(T.add(l_i2t, l_t2i), 0.5)


def retrieval_top1(encoder: DualEncoder, images: np.ndarray,
                   captions: list[str], pool: int = 64) -> float:
    """Image-to-text retrieval accuracy over pools of ``pool`` candidates.

    A hit requires retrieving a caption with the exact same text, so
    duplicate captions never count against the encoder.
    """
    n = len(captions)
    hits = 0
    total = 0
    with T.no_grad():
        for start in range(0, n - n % pool, pool):
            sl = slice(start, start + pool)
            ie = encoder.embed_images(images[sl]).data
            te = encoder.embed_captions(captions[sl]).data
            picks = np.argmax(ie @ te.T, axis=1)
            caps = captions[sl]
            hits += sum(caps[picks[i]] == caps[i] for i in range(pool))
            total += pool
    if total == 0:
        raise ContractError(f"retrieval pool {pool} exceeds the validation set size {n}")
    return hits / total


def train_dual_encoder(manifest: DatasetManifest, seed: int, *,
                       batch_size: int = 64, max_steps: int = 4000,
                       eval_every: int = 250, target_top1: float = 0.7,
                       floor_top1: float = 0.5, lr: float = 1e-3,
                       extra_vocab: list[str] = ()) -> DualEncoder:
    """Contrastive training on a clean manifest until validation retrieval
    top-1 reaches ``target_top1`` (aborts below ``floor_top1`` at budget)."""
    if any(r.mismatched for r in manifest.records):
        raise ContractError("dual encoder training requires an uncorrupted manifest")
    if len(manifest.records) < 1000:
        raise ContractError(
            f"dual encoder training needs >= 1000 pairs, got {len(manifest.records)}")

    from .phantom import grammar_tokens
    vocab = Vocabulary.from_captions([r.caption for r in manifest.records],
                                     extra_words=list(grammar_tokens()) + list(extra_vocab))
    enc = DualEncoder(spawn_rng(seed, "dual-init"), vocab)

    train_recs = manifest.split("train")
    val_recs = manifest.split("val")
    train_imgs = np.stack([resize_image(load_image(manifest.image_path(r)), enc.image_side)
                           for r in train_recs])
    val_imgs = np.stack([resize_image(load_image(manifest.image_path(r)), enc.image_side)
                         for r in val_recs])
    tok = [tokenize(r.caption, vocab) for r in train_recs]
    ids = np.stack([t[0] for t in tok])
    masks = np.stack([t[1] for t in tok])
    val_caps = [r.caption for r in val_recs]

    params = enc.parameters()
    opt = Adam(params, lr=lr)
    best = 0.0
    for step in range(max_steps):
        rng = spawn_rng(seed, "dual-step", step)
        idx = rng.choice(len(train_recs), size=min(batch_size, len(train_recs)),
                         replace=False)
        graph = T.ComputeGraph()
        with T.use_graph(graph):
            ie = enc.embed_images(train_imgs[idx])
            te = enc.embed_texts(ids[idx], masks[idx])
            loss = contrastive_loss(ie, te, enc.log_scale)
            T.backward(loss, graph)
        clip_global_norm(params, 1.0)
        opt.step()
        opt.zero_grad()
        if (step + 1) % eval_every == 0 or step == max_steps - 1:
            enc.trained = True
            acc = retrieval_top1(enc, val_imgs, val_caps)
            enc.trained = False
            best = max(best, acc)
            if acc >= target_top1:
                enc.trained = True
                return enc
    if best < floor_top1:
        raise ContractError(
            f"dual encoder failed to train: best validation top-1 {best:.3f} "
            f"< {floor_top1} after {max_steps} steps (lr={lr}, batch={batch_size})")
    enc.trained = True
    return enc


def similarity_score(image: np.ndarray, caption: str, encoder: DualEncoder) -> float:
    return encoder.similarity(image, caption)


# ------------------------------------------------------------------ filtering


@dataclass
class FilterReport:
    threshold: float
    threshold_space: str
    kept_ids: list[str]
    dropped_ids: list[str]
    histogram: dict = field(default_factory=dict)
    precision: float | None = None
    recall: float | None = None
    clean_keep_rate: float | None = None

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold, "threshold_space": self.threshold_space,
            "kept": len(self.kept_ids), "dropped": len(self.dropped_ids),
            "kept_ids": self.kept_ids, "dropped_ids": self.dropped_ids,
            "histogram": self.histogram, "precision": self.precision,
            "recall": self.recall, "clean_keep_rate": self.clean_keep_rate,
        }


def _score_histogram(scores: np.ndarray, bins: int = 40) -> dict:
    counts, edges = np.histogram(scores, bins=bins, range=(-1.0, 1.0))
    return {"edges": [round(float(e), 6) for e in edges.tolist()],
            "counts": counts.tolist()}


def filter_pairs(manifest: DatasetManifest, encoder: DualEncoder,
                 threshold: float = 0.6, threshold_space: str = "cosine",
                 scores: np.ndarray | None = None) -> tuple[DatasetManifest, FilterReport]:
    """Keep records scoring >= threshold; emit a partitioned report.

    threshold_space "cosine" compares raw cosines; "logit" compares
    temperature-scaled cosines (both interpretations of the reference
    threshold are available, cosine is the default reading).
    """
    if threshold_space not in ("cosine", "logit"):
        raise ContractError(f"unknown threshold_space {threshold_space!r}")
    if scores is None:
        scores = encoder.score_manifest(manifest)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(manifest.records),):
        raise ContractError("one score per record required")
    compare = scores
    if threshold_space == "logit":
        compare = scores * float(np.exp(encoder.log_scale.data[0]))

    keep = compare >= threshold
    kept_ids = [r.id for r, k in zip(manifest.records, keep) if k]
    dropped_ids = [r.id for r, k in zip(manifest.records, keep) if not k]

    flags = np.array([r.mismatched for r in manifest.records])
    precision = recall = clean_keep = None
    if flags.any():
        dropped_flagged = int((~keep & flags).sum())
        recall = dropped_flagged / int(flags.sum())
        precision = dropped_flagged / max(1, int((~keep).sum()))
        clean_keep = int((keep & ~flags).sum()) / max(1, int((~flags).sum()))

    report = FilterReport(threshold=float(threshold), threshold_space=threshold_space,
                          kept_ids=kept_ids, dropped_ids=dropped_ids,
                          histogram=_score_histogram(scores),
                          precision=precision, recall=recall, clean_keep_rate=clean_keep)

    kept_records = []
    for rec, k, sc in zip(manifest.records, keep, scores):
        if k:
            clone = rec.to_json()
            clone["similarity"] = round(float(sc), 6)
            from .data import CaptionRecord
            kept_records.append(CaptionRecord.from_json(clone))
    filtered = DatasetManifest(
        provenance={**manifest.provenance,
                    "filter": {"threshold": float(threshold), "space": threshold_space,
                               "encoder": encoder.content_hash()}},
        records=kept_records, root=manifest.root)
    return filtered, report


def calibrate_threshold(scores: np.ndarray, flags: np.ndarray) -> tuple[float, dict]:
    """Threshold maximizing F1 for flagging mismatches (dropped = predicted bad).

    Ties prefer the lowest threshold, which keeps more records.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    if scores.shape != flags.shape:
        raise ContractError("scores and flags must align")
    if not flags.any() or flags.all():
        raise ContractError("calibration needs both flagged and clean records")
    order = np.sort(np.unique(scores))
    cands = [-1.0] + ((order[1:] + order[:-1]) / 2.0).tolist() + [1.0 + 1e-9]
    best = (-1.0, -1.0, {})
    for thr in cands:
        pred_bad = scores < thr
        tp = int((pred_bad & flags).sum())
        fp = int((pred_bad & ~flags).sum())
        fn = int((~pred_bad & flags).sum())
        prec = tp / max(1, tp + fp)
        rec = tp / max(1, tp + fn)
        f1 = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
        if f1 > best[1] + 1e-12:
            best = (thr, f1, {"precision": prec, "recall": rec, "f1": f1})
    return float(best[0]), best[2]


# ------------------------------------------------------------------ refinement


def _normalize_ws(caption: str) -> str:
    return " ".join(caption.split())


def refine_caption(caption: str, blocklist: tuple[str, ...] = BOILERPLATE_PHRASES) -> str:
    """Strip blocklisted clauses and normalize whitespace; idempotent.

    If stripping would empty the caption the original (whitespace-normalized)
    text is kept; ``refine_caption_flagged`` exposes that condition.
    """
    return refine_caption_flagged(caption, blocklist)[0]


def refine_caption_flagged(caption: str,
                           blocklist: tuple[str, ...] = BOILERPLATE_PHRASES
                           ) -> tuple[str, bool]:
    blocked = {tuple(words_of(p)) for p in blocklist}
    clauses = [c.strip() for c in caption.split(",")]
    kept = [_normalize_ws(c) for c in clauses
            if c.strip() and tuple(words_of(c)) not in blocked]
    if not kept:
        return _normalize_ws(caption), True
    return ", ".join(kept), False
