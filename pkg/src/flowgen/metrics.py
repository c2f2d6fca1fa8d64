"""Distribution and alignment metrics over a domain-trained feature extractor.

The extractor is a small patch transformer trained to classify phantom
severity grades; its penultimate 64-dim activations feed FID and KID, its
class posteriors feed the Inception-style score.  Numbers computed with it
are comparable only across runs of this artifact, not with results based on
Inception-V3 features.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .data import DatasetManifest, load_image, resize_image
from .dit import extract_patches, grid_position_encoding
from .optim import Adam, clip_global_norm
from .tensor import Tensor
from .util import ContractError, canonical_json, sha256_hex, spawn_rng

FEATURE_DIM = 64
N_CLASSES = 5
METRIC_SIDE = 32


def metric_view(images: np.ndarray) -> np.ndarray:
    """Standardize a batch to the 32x32 lens all metrics operate through."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ContractError(f"metric_view: expected [B,3,H,W], got {images.shape}")
    if images.shape[2] == METRIC_SIDE and images.shape[3] == METRIC_SIDE:
        return images
    return np.stack([resize_image(im, METRIC_SIDE) for im in images])


class FeatureExtractor(nn.Module):
    """Patchify + 3 transformer blocks + 5-way grade head; features are the
    pooled penultimate activations."""

    def __init__(self, rng: np.random.Generator, patch_size: int = 4,
                 d_model: int = FEATURE_DIM, n_heads: int = 4):
        super().__init__()
        self.patch_size = patch_size
        self.d_model = d_model
        self.patch_embed = nn.Linear(rng, 3 * patch_size * patch_size, d_model)
        self.block1 = nn.EncoderBlock(rng, d_model, n_heads)
        self.block2 = nn.EncoderBlock(rng, d_model, n_heads)
        self.block3 = nn.EncoderBlock(rng, d_model, n_heads)
        self.norm = nn.LayerNorm(d_model)
        self.head = nn.Linear(rng, d_model, N_CLASSES)
        self.trained = False

    def forward_batch(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """[B,3,32,32] -> (features [B,64], logits [B,5]), on the tape."""
        images = metric_view(images)
        b = images.shape[0]
        hp = METRIC_SIDE // self.patch_size
        raw = extract_patches(images, self.patch_size)
        x = self.patch_embed(Tensor(raw.reshape(b * hp * hp, -1)))
        x = T.reshape(x, (b, hp * hp, self.d_model))
        x = T.add(x, Tensor(grid_position_encoding(hp, hp, self.d_model).astype(np.float32)))
        x = self.block1(x)
        x = self.block2(x)
        x = self.block3(x)
        feats = self.norm(T.mean(x, axis=1))
        return feats, self.head(feats)

    def content_hash(self) -> str:
        parts = [f"{name}:{sha256_hex(p.data.tobytes())}"
                 for name, p in sorted(self.named_parameters().items())]
        return sha256_hex(canonical_json(parts).encode("utf-8"))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    b, k = logits.shape
    onehot = np.zeros((b, k), dtype=np.float32)
    onehot[np.arange(b), np.asarray(labels, dtype=int)] = 1.0
    return T.scale(T.sum_(T.mul(T.log_softmax(logits), Tensor(onehot))), -1.0 / b)


def grade_accuracy(extractor: FeatureExtractor, images: np.ndarray,
                   labels: np.ndarray, batch: int = 128) -> float:
    hits = 0
    with T.no_grad():
        for start in range(0, len(images), batch):
            _, logits = extractor.forward_batch(images[start:start + batch])
            hits += int((np.argmax(logits.data, axis=1)
                         == labels[start:start + batch]).sum())
    return hits / len(images)


def train_classifier(images: np.ndarray, labels: np.ndarray,
                     val_images: np.ndarray, val_labels: np.ndarray, seed: int, *,
                     batch_size: int = 64, max_steps: int = 2500,
                     eval_every: int = 250, target_acc: float = 0.93,
                     lr: float = 1e-3) -> tuple[FeatureExtractor, float]:
    """Train a grade classifier; returns (model, best validation accuracy)."""
    images = metric_view(images)
    labels = np.asarray(labels, dtype=int)
    model = FeatureExtractor(spawn_rng(seed, "fx-init"))
    params = model.parameters()
    opt = Adam(params, lr=lr)
    best = 0.0
    for step in range(max_steps):
        rng = spawn_rng(seed, "fx-step", step)
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        graph = T.ComputeGraph()
        with T.use_graph(graph):
            _, logits = model.forward_batch(images[idx])
            loss = cross_entropy(logits, labels[idx])
            T.backward(loss, graph)
        clip_global_norm(params, 1.0)
        opt.step()
        opt.zero_grad()
        if (step + 1) % eval_every == 0 or step == max_steps - 1:
            acc = grade_accuracy(model, val_images, val_labels)
            best = max(best, acc)
            if acc >= target_acc:
                break
    model.trained = True
    return model, best


def train_feature_extractor(manifest: DatasetManifest, seed: int,
                            min_val_acc: float = 0.9, **kwargs) -> FeatureExtractor:
    """Grade-classifier training gated on >= ``min_val_acc`` validation accuracy."""
    def _load(split):
        recs = manifest.split(split)
        imgs = np.stack([resize_image(load_image(manifest.image_path(r)), METRIC_SIDE)
                         for r in recs])
        labels = np.array([r.params["severity_grade"] for r in recs], dtype=int)
        return imgs, labels

    tr_x, tr_y = _load("train")
    va_x, va_y = _load("val")
    model, best = train_classifier(tr_x, tr_y, va_x, va_y, seed, **kwargs)
    if best < min_val_acc:
        model.trained = False
        raise ContractError(
            f"feature extractor reached only {best:.3f} validation accuracy "
            f"(needs >= {min_val_acc}); enlarge the manifest or budget")
    return model


def extract_features(images: np.ndarray, extractor: FeatureExtractor
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Per-image features and class probabilities.

    Images are processed one at a time so a row depends only on its own
    pixels, never on batch composition (bitwise batch invariance).
    """
    if not extractor.trained:
        raise ContractError("feature extractor is untrained")
    images = metric_view(images)
    n = images.shape[0]
    feats = np.empty((n, FEATURE_DIM), dtype=np.float32)
    probs = np.empty((n, N_CLASSES), dtype=np.float32)
    with T.no_grad():
        for i in range(n):
            f, logits = extractor.forward_batch(images[i:i + 1])
            feats[i] = f.data[0]
            probs[i] = T.softmax(logits).data[0]
    return feats, probs


# ------------------------------------------------------------------ FID


def _psd_eigvals(mat: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < -1e-6:
        raise ContractError(f"{label}: eigenvalue {vals.min():.3e} below -1e-6")
    return np.clip(vals, 0.0, None), vecs


def compute_fid(features_real: np.ndarray, features_gen: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    a = np.asarray(features_real, dtype=np.float64)
    b = np.asarray(features_gen, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError(f"compute_fid: bad shapes {a.shape}, {b.shape}")
    d = a.shape[1]
    if min(len(a), len(b)) < 2 * d:
        warnings.warn(f"FID with fewer than {2 * d} samples per side is noisy",
                      stacklevel=2)
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    s1 = np.cov(a, rowvar=False)
    s2 = np.cov(b, rowvar=False)
    if not (np.isfinite(s1).all() and np.isfinite(s2).all()):
        raise ContractError("compute_fid: non-finite covariance")
    vals1, vecs1 = _psd_eigvals(s1, "cov(real)")
    s1_half = (vecs1 * np.sqrt(vals1)) @ vecs1.T
    inner = s1_half @ s2 @ s1_half
    vals_m, _ = _psd_eigvals(inner, "sqrt argument")
    tr_sqrt = float(np.sqrt(vals_m).sum())
    diff = mu1 - mu2
    fid = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    return max(fid, 0.0)


# ------------------------------------------------------------------ KID


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased squared MMD with the degree-3 polynomial kernel."""
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ContractError("mmd2 needs at least 2 samples per side")
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


def compute_kid(features_real: np.ndarray, features_gen: np.ndarray,
                n_subsets: int = 100, subset_size: int = 100,
                seed: int = 0) -> tuple[float, float]:
    """Mean and std of the unbiased MMD^2 over seeded random subsets."""
    a = np.asarray(features_real, dtype=np.float64)
    b = np.asarray(features_gen, dtype=np.float64)
    size = min(subset_size, len(a), len(b))
    if subset_size > min(len(a), len(b)):
        raise ContractError(
            f"subset_size {subset_size} exceeds set sizes {len(a)}, {len(b)}")
    rng = spawn_rng(seed, "kid")
    vals = np.empty(n_subsets, dtype=np.float64)
    for i in range(n_subsets):
        ia = rng.choice(len(a), size=size, replace=False)
        ib = rng.choice(len(b), size=size, replace=False)
        vals[i] = mmd2_unbiased(a[ia], b[ib])
    return float(vals.mean()), float(vals.std())


# ------------------------------------------------------------------ IS


def compute_is(class_probs: np.ndarray, eps: float = 1e-12) -> float:
    """exp(mean KL(p(y|x) || marginal)); lies in [1, n_classes]."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2:
        raise ContractError(f"compute_is: expected [n, k], got {p.shape}")
    if (p < -1e-9).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-4:
        raise ContractError("compute_is: rows must be probability distributions")
    p = np.clip(p, 0.0, None)
    marginal = p.mean(axis=0)
    logp = np.log(np.maximum(p, eps))
    logq = np.log(np.maximum(marginal, eps))
    kl = np.where(p > 0, p * (logp - logq[None, :]), 0.0).sum(axis=1)
    return float(np.exp(kl.mean()))


# ------------------------------------------------------------------ alignment


def alignment_score(images: np.ndarray, captions: list[str],
                    encoder) -> tuple[float, float]:
    """(mean pairwise cosine, retrieval top-1 over the whole batch)."""
    if len(images) != len(captions):
        raise ContractError(
            f"alignment: {len(images)} images vs {len(captions)} captions")
    n = len(captions)
    with T.no_grad():
        ie = np.stack([encoder.embed_images(metric_view(images[i:i + 1])).data[0]
                       for i in range(n)])
        te = np.stack([encoder.embed_captions([captions[i]]).data[0]
                       for i in range(n)])
    sims = ie @ te.T
    mean_score = float(np.diag(sims).mean())
    picks = np.argmax(sims, axis=1)
    top1 = float(np.mean([captions[picks[i]] == captions[i] for i in range(n)]))
    return mean_score, top1


# ------------------------------------------------------------------ QWK


def quadratic_weighted_kappa(y_true: np.ndarray, y_pred: np.ndarray,
                             n_classes: int = N_CLASSES) -> float:
    """Chance-corrected agreement with (i-j)^2 / (K-1)^2 disagreement weights."""
    t = np.asarray(y_true, dtype=int)
    p = np.asarray(y_pred, dtype=int)
    if t.shape != p.shape or t.ndim != 1 or len(t) == 0:
        raise ContractError("qwk: labels must be equal-length non-empty 1-D")
    if t.min() < 0 or p.min() < 0 or t.max() >= n_classes or p.max() >= n_classes:
        raise ContractError(f"qwk: labels outside [0, {n_classes})")
    k = n_classes
    observed = np.zeros((k, k), dtype=np.float64)
    np.add.at(observed, (t, p), 1.0)
    idx = np.arange(k, dtype=np.float64)
    w = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / len(t)
    denom = float((w * expected).sum())
    if denom == 0.0:
        return 1.0
    return float(1.0 - (w * observed).sum() / denom)


@dataclass
class MetricReport:
    fid: float
    kid_mean: float
    kid_std: float
    inception_score: float
    alignment_score: float
    alignment_top1: float
    n_real: int
    n_gen: int
    extractor_hash: str

    def __post_init__(self):
        if self.fid < 0 or self.kid_std < 0:
            raise ContractError("metric report: fid and kid_std must be non-negative")
        if self.inception_score < 1.0 - 1e-9:
            raise ContractError("metric report: inception score below 1")

    def to_json(self) -> dict:
        return {"fid": self.fid, "kid_mean": self.kid_mean, "kid_std": self.kid_std,
                "inception_score": self.inception_score,
                "alignment_score": self.alignment_score,
                "alignment_top1": self.alignment_top1,
                "n_real": self.n_real, "n_gen": self.n_gen,
                "extractor_hash": self.extractor_hash}
