"""Three-stage training pipeline, sampling, evaluation, and experiments.

Stages: (1) caption-conditioned pretraining at low resolution, (2) curation
of caption-image pairs with a contrastively trained dual encoder, and (3)
higher-resolution fine-tuning with mixed aspect ratios via dynamic padding.
On top sit generation with classifier-free guidance, metric evaluation with
a contact sheet, a scarce-data augmentation experiment, and a component
ablation ladder.

Every artifact embeds provenance (config hash + seed) and references to its
inputs by content hash, so any output can be traced and any stage re-run
byte-identically.  Per-step randomness derives from (seed, step), which makes
interrupted runs resumable without replaying earlier steps.
"""

from __future__ import annotations

import json
import math
import os
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .curation import (DualEncoder, calibrate_threshold, filter_pairs,
                       refine_caption_flagged, train_dual_encoder)
from .data import (CaptionRecord, DatasetManifest, load_image, save_image)
from .dit import ModelConfig, VelocityDiT, dynamic_pad, pad_patch_mask, pad_pixel_mask
from .flow import SamplerConfig, TrainState, guided_velocity, sample_ode, train_step
from .metrics import (FeatureExtractor, MetricReport, alignment_score,
                      compute_fid, compute_is, compute_kid, extract_features,
                      metric_view, quadratic_weighted_kappa, train_classifier,
                      train_feature_extractor)
from .optim import Adam
from .phantom import (build_manifest, corrupt_captions, grammar_tokens,
                      inject_boilerplate, parse_caption)
from .text import TextEncoder, Vocabulary, all_unknown, tokenize
from .util import (ContractError, canonical_json, config_hash, file_hash,
                   spawn_rng, stable_seed)

STAGES = ("pretrain", "curate", "finetune")


# ------------------------------------------------------------------ plumbing


class RunLedger:
    """Append-only JSONL record of every run; artifacts point back here."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, kind: str, payload: dict) -> None:
        entry = {"kind": kind, "wall_clock_s": payload.pop("wall_clock_s", None),
                 **payload}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(canonical_json(entry) + "\n")


@contextmanager
def locked_dir(path: str | Path):
    """Exclusive ownership of an output directory via a pid lock file."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ContractError(f"output directory {path} is locked by another process "
                            f"(remove {lock} if that process is gone)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        lock.unlink(missing_ok=True)


def _ref(path: str | Path) -> dict:
    path = Path(path)
    return {"path": str(path), "sha256": file_hash(path)}


def _verify_refs(refs: dict, where: str) -> None:
    for name, ref in (refs or {}).items():
        p = Path(ref["path"])
        if not p.exists():
            raise ContractError(f"{where}: referenced {name} missing at {p}")
        if file_hash(p) != ref["sha256"]:
            raise ContractError(f"{where}: referenced {name} at {p} has been modified")


# ------------------------------------------------------------------ model IO


@dataclass
class GeneratorBundle:
    dit: VelocityDiT
    text_encoder: TextEncoder
    vocab: Vocabulary
    model_config: ModelConfig
    metadata: dict = field(default_factory=dict)

    def parameters(self):
        return self.dit.parameters() + self.text_encoder.parameters()

    def arrays(self) -> dict[str, np.ndarray]:
        return {**self.dit.state_arrays("dit."),
                **self.text_encoder.state_arrays("text.")}


def build_generator(seed: int, vocab: Vocabulary,
                    model_cfg: ModelConfig | None = None) -> GeneratorBundle:
    cfg = model_cfg or ModelConfig()
    rng = spawn_rng(seed, "init-generator")
    tenc = TextEncoder(rng, len(vocab), d_text=cfg.d_text)
    dit = VelocityDiT(rng, cfg)
    return GeneratorBundle(dit=dit, text_encoder=tenc, vocab=vocab, model_config=cfg)


def save_generator(path: str | Path, bundle: GeneratorBundle,
                   optimizer: Adam | None, metadata: dict) -> None:
    arrays = bundle.arrays()
    if optimizer is not None:
        arrays.update({f"opt.{k}": v for k, v in optimizer.state_arrays().items()})
        metadata = {**metadata, "opt_step": optimizer.step_count}
    metadata = {**metadata, "kind": "generator",
                "model": bundle.model_config.to_dict(),
                "vocab": bundle.vocab.to_json(),
                "vocab_hash": bundle.vocab.content_hash()}
    save_checkpoint(path, arrays, metadata)


def load_generator(path: str | Path, verify: bool = True
                   ) -> tuple[GeneratorBundle, dict[str, np.ndarray]]:
    arrays, metadata = load_checkpoint(path)
    if metadata.get("kind") != "generator":
        raise ContractError(f"{path} is not a generator checkpoint")
    if verify:
        _verify_refs(metadata.get("refs", {}), str(path))
    vocab = Vocabulary.from_json(metadata["vocab"])
    cfg = ModelConfig.from_dict(metadata["model"])
    bundle = build_generator(0, vocab, cfg)
    bundle.dit.load_state_arrays(arrays, "dit.")
    bundle.text_encoder.load_state_arrays(arrays, "text.")
    bundle.metadata = metadata
    opt_arrays = {k[len("opt."):]: v for k, v in arrays.items() if k.startswith("opt.")}
    return bundle, opt_arrays


def save_dual_encoder(path: str | Path, encoder: DualEncoder, metadata: dict) -> None:
    metadata = {**metadata, "kind": "dual_encoder", "trained": encoder.trained,
                "vocab": encoder.vocab.to_json(),
                "vocab_hash": encoder.vocab.content_hash()}
    save_checkpoint(path, encoder.state_arrays(), metadata)


def load_dual_encoder(path: str | Path) -> DualEncoder:
    arrays, metadata = load_checkpoint(path)
    if metadata.get("kind") != "dual_encoder":
        raise ContractError(f"{path} is not a dual-encoder checkpoint")
    vocab = Vocabulary.from_json(metadata["vocab"])
    enc = DualEncoder(spawn_rng(0, "dual-init"), vocab)
    enc.load_state_arrays(arrays)
    enc.trained = bool(metadata.get("trained", False))
    return enc


def save_feature_extractor(path: str | Path, model: FeatureExtractor,
                           metadata: dict) -> None:
    metadata = {**metadata, "kind": "feature_extractor", "trained": model.trained}
    save_checkpoint(path, model.state_arrays(), metadata)


def load_feature_extractor(path: str | Path) -> FeatureExtractor:
    arrays, metadata = load_checkpoint(path)
    if metadata.get("kind") != "feature_extractor":
        raise ContractError(f"{path} is not a feature-extractor checkpoint")
    model = FeatureExtractor(spawn_rng(0, "fx-init"))
    model.load_state_arrays(arrays)
    model.trained = bool(metadata.get("trained", False))
    return model


# ------------------------------------------------------------------ training


@dataclass
class StageConfig:
    stage: str
    manifest: str
    out_checkpoint: str
    seed: int = 0
    resolution: int = 32
    steps: int = 1000
    batch_size: int = 32
    lr: float = 3e-4
    caption_dropout: float = 0.1
    clip_norm: float = 1.0
    checkpoint_every: int = 500
    loss_log_every: int = 50
    in_checkpoint: str | None = None    # init weights (finetune)
    model: dict = field(default_factory=dict)
    ledger: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ContractError("steps and batch_size must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{**ModelConfig().to_dict(), **self.model})

    def full_hash(self) -> str:
        return config_hash(asdict(self))

    def run_hash(self, manifest_hash: str, init_hash: str | None) -> str:
        """Identity of the training trajectory: everything that shapes the
        parameter sequence except how many steps get taken."""
        return config_hash({
            "stage": self.stage, "seed": self.seed, "resolution": self.resolution,
            "batch_size": self.batch_size, "lr": self.lr,
            "caption_dropout": self.caption_dropout, "clip_norm": self.clip_norm,
            "model": self.model_config().to_dict(),
            "manifest": manifest_hash, "init": init_hash,
        })

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - allowed
        if unknown:
            raise ContractError(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**d)


def _group_records(manifest: DatasetManifest, records: list[CaptionRecord],
                   patch_size: int, max_side: int, vocab: Vocabulary) -> list[dict]:
    """Load, pad, and tokenize records grouped by padded image size."""
    groups: dict[tuple[int, int], dict] = {}
    for rec in records:
        img = load_image(manifest.image_path(rec))
        padded, spec = dynamic_pad(img, patch_size, max_side)
        key = padded.shape[1:]
        g = groups.setdefault(key, {"images": [], "ids": [], "mask": [],
                                    "pixel_mask": [], "pad_mask": [], "records": []})
        ids, mask = tokenize(rec.caption, vocab)
        g["images"].append(padded)
        g["ids"].append(ids)
        g["mask"].append(mask)
        g["pixel_mask"].append(pad_pixel_mask(spec))
        g["pad_mask"].append(pad_patch_mask(spec, patch_size))
        g["records"].append(rec)
    out = []
    for key in sorted(groups):
        g = groups[key]
        out.append({
            "size": key,
            "images": np.stack(g["images"]),
            "ids": np.stack(g["ids"]),
            "mask": np.stack(g["mask"]),
            "pixel_mask": np.stack(g["pixel_mask"]),
            "pad_mask": np.stack(g["pad_mask"]),
            "records": g["records"],
        })
    return out


def _train_loop(cfg: StageConfig, bundle: GeneratorBundle, groups: list[dict],
                run_hash: str, metadata_base: dict, start_step: int,
                optimizer: Adam) -> tuple[Path, list]:
    state = TrainState(step=start_step)
    sizes = np.array([len(g["records"]) for g in groups], dtype=np.float64)
    weights = sizes / sizes.sum()
    loss_samples = []
    out_path = Path(cfg.out_checkpoint)

    def _save(step: int) -> None:
        save_generator(out_path, bundle, optimizer,
                       {**metadata_base, "step": step, "run_hash": run_hash})

    for k in range(start_step, cfg.steps):
        rng = spawn_rng(cfg.seed, "step", k)
        gi = int(rng.choice(len(groups), p=weights)) if len(groups) > 1 else 0
        g = groups[gi]
        n = len(g["records"])
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = {"x_star": g["images"][idx], "ids": g["ids"][idx],
                 "mask": g["mask"][idx], "pixel_mask": g["pixel_mask"][idx],
                 "pad_mask": g["pad_mask"][idx]}
        loss = train_step(bundle.dit, bundle.text_encoder, batch, optimizer, rng,
                          state, caption_dropout=cfg.caption_dropout,
                          clip_norm=cfg.clip_norm)
        if k % cfg.loss_log_every == 0 or k == cfg.steps - 1:
            loss_samples.append([k, None if math.isnan(loss) else round(loss, 6)])
        if (k + 1) % cfg.checkpoint_every == 0 and (k + 1) < cfg.steps:
            _save(k + 1)
    _save(cfg.steps)
    return out_path, loss_samples


def _prepare_resume(cfg: StageConfig, run_hash: str
                    ) -> tuple[GeneratorBundle | None, dict[str, np.ndarray], int]:
    """Resume from out_checkpoint when it holds an unfinished run of this exact
    configuration; a finished run retrains from scratch (byte-identical rerun);
    a different configuration is rejected."""
    out = Path(cfg.out_checkpoint)
    if not out.exists():
        return None, {}, 0
    bundle, opt_arrays = load_generator(out)
    meta = bundle.metadata
    if meta.get("run_hash") != run_hash or meta.get("stage") != cfg.stage:
        raise ContractError(
            f"refusing to overwrite {out}: it was produced by a different "
            "configuration (delete it to retrain)")
    step = int(meta.get("step", 0))
    if step >= cfg.steps:
        return None, {}, 0
    return bundle, opt_arrays, step


def stage1_pretrain(cfg: StageConfig) -> Path:
    """Train generator + text encoder from scratch on the manifest's train split."""
    if cfg.stage != "pretrain":
        raise ContractError(f"stage1_pretrain got stage {cfg.stage!r}")
    t0 = time.monotonic()
    manifest = DatasetManifest.load(cfg.manifest)
    manifest_hash = manifest.content_hash()
    model_cfg = cfg.model_config()

    vocab = Vocabulary.from_captions([r.caption for r in manifest.records],
                                     extra_words=grammar_tokens())
    run_hash = cfg.run_hash(manifest_hash, None)
    resumed, opt_arrays, start_step = _prepare_resume(cfg, run_hash)
    bundle = resumed or build_generator(cfg.seed, vocab, model_cfg)

    groups = _group_records(manifest, manifest.split("train"),
                            model_cfg.patch_size, model_cfg.max_side, bundle.vocab)
    optimizer = Adam(bundle.parameters(), lr=cfg.lr)
    if opt_arrays:
        optimizer.load_state_arrays(opt_arrays, bundle.metadata["opt_step"])

    metadata_base = {
        "stage": cfg.stage, "seed": cfg.seed, "resolution": cfg.resolution,
        "config_hash": cfg.full_hash(), "caption_dropout": cfg.caption_dropout,
        "refs": {"manifest": _ref(cfg.manifest)},
    }
    out, losses = _train_loop(cfg, bundle, groups, run_hash, metadata_base,
                              start_step, optimizer)
    if cfg.ledger:
        RunLedger(cfg.ledger).append("train.stage1", {
            "config_hash": cfg.full_hash(), "run_hash": run_hash,
            "manifest_hash": manifest_hash, "steps": cfg.steps,
            "loss_samples": losses, "checkpoint": str(out),
            "wall_clock_s": round(time.monotonic() - t0, 3)})
    return out


def stage3_finetune(cfg: StageConfig) -> Path:
    """Continue training at higher resolution with mixed-aspect batches."""
    if cfg.stage != "finetune":
        raise ContractError(f"stage3_finetune got stage {cfg.stage!r}")
    if cfg.in_checkpoint is None:
        raise ContractError("finetune requires in_checkpoint (the pretrained model)")
    t0 = time.monotonic()
    manifest = DatasetManifest.load(cfg.manifest)
    manifest_hash = manifest.content_hash()

    init_bundle, _ = load_generator(cfg.in_checkpoint)
    pre_res = int(init_bundle.metadata.get("resolution", 0))
    if cfg.resolution < pre_res:
        raise ContractError(
            f"finetune resolution {cfg.resolution} below pretrain resolution {pre_res}")
    model_cfg = init_bundle.model_config
    needed = max((math.ceil(h / model_cfg.patch_size) * math.ceil(w / model_cfg.patch_size))
                 for h, w in {tuple(r.size) for r in manifest.records})
    if needed > model_cfg.max_patches:
        raise ContractError(
            f"checkpoint grid capacity exceeded: requires max_patches >= {needed}, "
            f"checkpoint has {model_cfg.max_patches}")

    init_hash = file_hash(cfg.in_checkpoint)
    run_hash = cfg.run_hash(manifest_hash, init_hash)
    resumed, opt_arrays, start_step = _prepare_resume(cfg, run_hash)
    bundle = resumed or init_bundle

    groups = _group_records(manifest, manifest.split("train"),
                            model_cfg.patch_size, model_cfg.max_side, bundle.vocab)
    optimizer = Adam(bundle.parameters(), lr=cfg.lr)
    if opt_arrays:
        optimizer.load_state_arrays(opt_arrays, bundle.metadata["opt_step"])

    metadata_base = {
        "stage": cfg.stage, "seed": cfg.seed, "resolution": cfg.resolution,
        "config_hash": cfg.full_hash(), "caption_dropout": cfg.caption_dropout,
        "refs": {"manifest": _ref(cfg.manifest),
                 "stage1_checkpoint": _ref(cfg.in_checkpoint)},
    }
    out, losses = _train_loop(cfg, bundle, groups, run_hash, metadata_base,
                              start_step, optimizer)
    if cfg.ledger:
        RunLedger(cfg.ledger).append("train.stage3", {
            "config_hash": cfg.full_hash(), "run_hash": run_hash,
            "manifest_hash": manifest_hash, "steps": cfg.steps,
            "loss_samples": losses, "checkpoint": str(out),
            "wall_clock_s": round(time.monotonic() - t0, 3)})
    return out


# ------------------------------------------------------------------ curation


@dataclass
class CurateConfig:
    manifest: str                       # manifest to score and filter
    out_dir: str
    seed: int = 0
    encoder_manifest: str | None = None  # clean manifest to train the encoder on
    encoder_checkpoint: str | None = None
    threshold: float = 0.6
    threshold_space: str = "cosine"
    calibrate: bool = True
    calibrate_split: str = "val"
    train_budget: dict = field(default_factory=dict)
    ledger: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "CurateConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown curate config keys: {sorted(unknown)}")
        return cls(**d)

    def full_hash(self) -> str:
        return config_hash(asdict(self))


def stage2_curate(cfg: CurateConfig) -> dict:
    """Score, filter, and refine a manifest; writes curated manifest + report.

    The similarity encoder is either loaded or trained on a clean manifest.
    When the target manifest carries mismatch flags (synthetic corruption),
    the threshold can be calibrated on its validation split.
    """
    t0 = time.monotonic()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(cfg.manifest)

    encoder_ref = None
    if cfg.encoder_checkpoint:
        encoder = load_dual_encoder(cfg.encoder_checkpoint)
        encoder_ref = _ref(cfg.encoder_checkpoint)
    elif cfg.encoder_manifest:
        clean = DatasetManifest.load(cfg.encoder_manifest)
        encoder = train_dual_encoder(clean, cfg.seed, **cfg.train_budget)
        enc_path = out_dir / "dual_encoder.fgck"
        save_dual_encoder(enc_path, encoder, {
            "seed": cfg.seed, "config_hash": cfg.full_hash(),
            "refs": {"manifest": _ref(cfg.encoder_manifest)}})
        encoder_ref = _ref(enc_path)
    else:
        raise ContractError("curate needs encoder_checkpoint or encoder_manifest")

    # refine captions first so boilerplate never drags scores down
    refined: list[CaptionRecord] = []
    refine_flags = 0
    for rec in manifest.records:
        new_caption, kept_original = refine_caption_flagged(rec.caption)
        refine_flags += int(kept_original)
        clone = rec.to_json()
        clone["caption"] = new_caption
        refined.append(CaptionRecord.from_json(clone))
    refined_manifest = DatasetManifest(provenance=manifest.provenance,
                                       records=refined, root=manifest.root)

    scores = encoder.score_manifest(refined_manifest)
    threshold = cfg.threshold
    calibration = None
    flags = np.array([r.mismatched for r in refined_manifest.records])
    if cfg.calibrate and flags.any() and not flags.all():
        in_split = np.array([r.split == cfg.calibrate_split
                             for r in refined_manifest.records])
        if flags[in_split].any() and (~flags[in_split]).any():
            threshold, calibration = calibrate_threshold(scores[in_split],
                                                         flags[in_split])

    curated, report = filter_pairs(refined_manifest, encoder, threshold,
                                   cfg.threshold_space, scores=scores)
    curated.provenance = {**curated.provenance,
                          "curation": {"config_hash": cfg.full_hash(),
                                       "seed": cfg.seed,
                                       "refine_kept_original": refine_flags}}
    manifest_path = out_dir / "curated.jsonl"
    curated.save(manifest_path)
    report_json = {**report.to_json(), "calibration": calibration,
                   "config_hash": cfg.full_hash(), "encoder": encoder_ref}
    (out_dir / "filter_report.json").write_text(
        canonical_json(report_json) + "\n", encoding="utf-8")
    if cfg.ledger:
        RunLedger(cfg.ledger).append("curate", {
            "config_hash": cfg.full_hash(),
            "manifest_hash": manifest.content_hash(),
            "curated_hash": curated.content_hash(),
            "kept": len(report.kept_ids), "dropped": len(report.dropped_ids),
            "threshold": threshold,
            "wall_clock_s": round(time.monotonic() - t0, 3)})
    return {"manifest": manifest_path, "report": report, "threshold": threshold,
            "encoder": encoder, "calibration": calibration}


# ------------------------------------------------------------------ sampling


def sample_images(bundle: GeneratorBundle, captions: list[str], seed: int,
                  sampler: SamplerConfig, size: tuple[int, int] = (32, 32),
                  batch: int = 32, start_index: int = 0) -> np.ndarray:
    """Generate one image per caption; noise is derived per (seed, index)."""
    cfg = bundle.model_config
    n = len(captions)
    if n == 0:
        return np.zeros((0, 3, size[0], size[1]), dtype=np.float32)
    h, w = int(size[0]), int(size[1])
    canvas, spec = dynamic_pad(np.zeros((cfg.channels, h, w), dtype=np.float32),
                               cfg.patch_size, cfg.max_side)
    ph, pw = canvas.shape[1], canvas.shape[2]
    n_patches = (ph // cfg.patch_size) * (pw // cfg.patch_size)
    pmask_row = pad_patch_mask(spec, cfg.patch_size)

    dropout = float(bundle.metadata.get("caption_dropout", 0.1))
    null = bundle.text_encoder.null_embedding()
    out = np.empty((n, cfg.channels, h, w), dtype=np.float32)
    for start in range(0, n, batch):
        caps = captions[start:start + batch]
        b = len(caps)
        toks = [tokenize(c, bundle.vocab) for c in caps]
        for c, (ids, mask) in zip(caps, toks):
            if all_unknown(ids, mask):
                warnings.warn(f"caption {c!r} tokenizes to all-unknown words; "
                              "generation proceeds on structure tokens only",
                              stacklevel=2)
        ids = np.stack([t[0] for t in toks])
        mask = np.stack([t[1] for t in toks])
        with T.no_grad():
            ctx_cond = bundle.text_encoder.encode_tokens(ids, mask).data
        ctx_null = np.broadcast_to(null.embedding, (b,) + null.embedding.shape).copy()
        mask_null = np.broadcast_to(null.mask, (b,) + null.mask.shape).copy()
        pad_mask = np.broadcast_to(pmask_row, (b, n_patches)).copy()
        velocity = guided_velocity(bundle.dit, ctx_cond, mask, ctx_null, mask_null,
                                   sampler.guidance_scale, pad_mask=pad_mask,
                                   trained_with_dropout=dropout > 0)
        eps = np.stack([
            spawn_rng(seed, "gen", start_index + start + i)
            .standard_normal((cfg.channels, ph, pw)).astype(np.float32)
            for i in range(b)])
        xs = sample_ode(velocity, eps.shape, sampler, eps=eps)
        out[start:start + b] = xs[:, :, :h, :w]
    return out


@dataclass
class GenerateConfig:
    checkpoint: str
    out_dir: str
    captions: list = field(default_factory=list)
    n: int = 1
    seed: int = 0
    size: list = field(default_factory=lambda: [32, 32])
    sampler: dict = field(default_factory=dict)
    ledger: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "GenerateConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown generate config keys: {sorted(unknown)}")
        return cls(**d)

    def full_hash(self) -> str:
        return config_hash(asdict(self))

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**{"seed": self.seed, **self.sampler})


def generate(cfg: GenerateConfig) -> list[Path]:
    """Write n PNGs + JSON sidecars; sidecar seeds replay bit-identically."""
    t0 = time.monotonic()
    if cfg.n < 0:
        raise ContractError(f"n must be >= 0, got {cfg.n}")
    if cfg.n > 0 and not cfg.captions:
        raise ContractError("generate needs at least one caption")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.n == 0:
        return []
    bundle, _ = load_generator(cfg.checkpoint)
    sampler = cfg.sampler_config()
    caps = [str(cfg.captions[i % len(cfg.captions)]) for i in range(cfg.n)]
    images = sample_images(bundle, caps, cfg.seed, sampler,
                           size=(int(cfg.size[0]), int(cfg.size[1])))
    ckpt_hash = file_hash(cfg.checkpoint)
    paths = []
    for i, (img, cap) in enumerate(zip(images, caps)):
        png = out_dir / f"gen_{i:05d}.png"
        save_image(png, img)
        sidecar = {"caption": cap, "seed": cfg.seed, "index": i,
                   "size": [int(cfg.size[0]), int(cfg.size[1])],
                   "sampler": sampler.to_dict(), "checkpoint": ckpt_hash,
                   "config_hash": cfg.full_hash()}
        png.with_suffix(".json").write_text(canonical_json(sidecar) + "\n",
                                            encoding="utf-8")
        paths.append(png)
    if cfg.ledger:
        RunLedger(cfg.ledger).append("generate", {
            "config_hash": cfg.full_hash(), "n": cfg.n,
            "checkpoint": ckpt_hash, "out_dir": str(out_dir),
            "wall_clock_s": round(time.monotonic() - t0, 3)})
    return paths


# ------------------------------------------------------------------ evaluate


def contact_sheet(images: np.ndarray, path: str | Path, cols: int = 5,
                  max_tiles: int = 25, gap: int = 2) -> None:
    """Tile the first images into one PNG grid."""
    n = min(len(images), max_tiles)
    if n == 0:
        raise ContractError("contact sheet needs at least one image")
    rows = math.ceil(n / cols)
    h, w = images.shape[2], images.shape[3]
    sheet = np.full((3, rows * h + gap * (rows - 1), cols * w + gap * (cols - 1)),
                    -1.0, dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, cols)
        sheet[:, r * (h + gap): r * (h + gap) + h,
              c * (w + gap): c * (w + gap) + w] = images[i]
    save_image(path, sheet)


@dataclass
class EvalConfig:
    checkpoint: str
    manifest: str
    extractor_checkpoint: str
    encoder_checkpoint: str
    out_dir: str
    n_gen: int = 128
    seed: int = 0
    size: list = field(default_factory=lambda: [32, 32])
    sampler: dict = field(default_factory=dict)
    kid_subsets: int = 100
    kid_subset_size: int = 64
    ledger: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown eval config keys: {sorted(unknown)}")
        return cls(**d)

    def full_hash(self) -> str:
        return config_hash(asdict(self))


def evaluate(cfg: EvalConfig) -> dict:
    """FID (val and test), KID, IS, and caption alignment for fresh samples."""
    t0 = time.monotonic()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle, _ = load_generator(cfg.checkpoint)
    extractor = load_feature_extractor(cfg.extractor_checkpoint)
    encoder = load_dual_encoder(cfg.encoder_checkpoint)
    manifest = DatasetManifest.load(cfg.manifest)

    val = manifest.split("val")
    test = manifest.split("test")
    caps = [val[i % len(val)].caption for i in range(cfg.n_gen)]
    sampler = SamplerConfig(**{"seed": cfg.seed, **cfg.sampler})
    gen = sample_images(bundle, caps, cfg.seed, sampler,
                        size=(int(cfg.size[0]), int(cfg.size[1])))

    def _real(recs):
        return np.stack([metric_view(load_image(manifest.image_path(r))[None])[0]
                         for r in recs])

    real_val, real_test = _real(val), _real(test)
    f_val, _ = extract_features(real_val, extractor)
    f_test, _ = extract_features(real_test, extractor)
    f_gen, p_gen = extract_features(gen, extractor)

    subset = min(cfg.kid_subset_size, len(f_val), len(f_gen))
    kid_mean, kid_std = compute_kid(f_val, f_gen, n_subsets=cfg.kid_subsets,
                                    subset_size=subset, seed=cfg.seed)
    align, top1 = alignment_score(gen, caps, encoder)
    reports = {}
    for name, f_real, n_real in (("val", f_val, len(val)), ("test", f_test, len(test))):
        reports[name] = MetricReport(
            fid=compute_fid(f_real, f_gen), kid_mean=kid_mean, kid_std=kid_std,
            inception_score=compute_is(p_gen), alignment_score=align,
            alignment_top1=top1, n_real=n_real, n_gen=cfg.n_gen,
            extractor_hash=extractor.content_hash()).to_json()

    payload = {"config_hash": cfg.full_hash(), "seed": cfg.seed,
               "checkpoint": file_hash(cfg.checkpoint),
               "manifest_hash": manifest.content_hash(), "reports": reports}
    (out_dir / "metrics.json").write_text(canonical_json(payload) + "\n",
                                          encoding="utf-8")
    contact_sheet(gen, out_dir / "contact_sheet.png")
    if cfg.ledger:
        RunLedger(cfg.ledger).append("eval", {
            "config_hash": cfg.full_hash(), "reports": reports,
            "wall_clock_s": round(time.monotonic() - t0, 3)})
    return payload


# ------------------------------------------------------------------ downstream


@dataclass
class DownstreamConfig:
    real_manifest: str
    synthetic_dir: str
    out_dir: str
    train_size: int = 400
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    classifier: dict = field(default_factory=dict)
    ledger: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "DownstreamConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown downstream config keys: {sorted(unknown)}")
        return cls(**d)

    def full_hash(self) -> str:
        return config_hash(asdict(self))


def _load_synthetic(dir_path: Path) -> tuple[np.ndarray, np.ndarray]:
    pngs = sorted(dir_path.glob("gen_*.png"))
    if not pngs:
        raise ContractError(f"no generated images under {dir_path}")
    images, labels = [], []
    for png in pngs:
        sidecar = json.loads(png.with_suffix(".json").read_text())
        labels.append(parse_caption(sidecar["caption"])["severity_grade"])
        images.append(load_image(png))
    return np.stack(images), np.array(labels, dtype=int)


def _scarce_subset(records: list[CaptionRecord], size: int, seed: int
                   ) -> list[CaptionRecord]:
    """Seeded grade-stratified subsample of the training records."""
    rng = spawn_rng(seed, "scarce")
    by_grade: dict[int, list[CaptionRecord]] = {}
    for r in records:
        by_grade.setdefault(r.params["severity_grade"], []).append(r)
    grades = sorted(by_grade)
    quota = {g: round(size * len(by_grade[g]) / len(records)) for g in grades}
    while sum(quota.values()) != size:
        adjust = 1 if sum(quota.values()) < size else -1
        g = max(grades, key=lambda g: adjust * len(by_grade[g]))
        quota[g] += adjust
    picked = []
    for g in grades:
        pool = by_grade[g]
        idx = rng.choice(len(pool), size=min(quota[g], len(pool)), replace=False)
        picked.extend(pool[i] for i in sorted(idx.tolist()))
    return picked


def downstream_augment(cfg: DownstreamConfig) -> dict:
    """Train a grade classifier on scarce real data with and without synthetic
    augmentation; report accuracy, macro-F1, and QWK on held-out real data."""
    t0 = time.monotonic()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(cfg.real_manifest)
    syn_x, syn_y = _load_synthetic(Path(cfg.synthetic_dir))
    syn_x = metric_view(syn_x)

    test_recs = manifest.split("test")
    test_x = np.stack([metric_view(load_image(manifest.image_path(r))[None])[0]
                       for r in test_recs])
    test_y = np.array([r.params["severity_grade"] for r in test_recs], dtype=int)

    def _stats(pred: np.ndarray) -> dict:
        acc = float((pred == test_y).mean())
        f1s = []
        for g in range(5):
            tp = int(((pred == g) & (test_y == g)).sum())
            fp = int(((pred == g) & (test_y != g)).sum())
            fn = int(((pred != g) & (test_y == g)).sum())
            denom = 2 * tp + fp + fn
            f1s.append(2 * tp / denom if denom else 0.0)
        return {"accuracy": acc, "macro_f1": float(np.mean(f1s)),
                "qwk": quadratic_weighted_kappa(test_y, pred)}

    results = {"baseline": [], "augmented": []}
    for seed in cfg.seeds:
        scarce = _scarce_subset(manifest.split("train"), cfg.train_size, seed)
        grades_present = {r.params["severity_grade"] for r in scarce}
        if grades_present != set(range(5)):
            raise ContractError(
                f"scarce split misses grades {sorted(set(range(5)) - grades_present)}")
        real_x = np.stack([metric_view(load_image(manifest.image_path(r))[None])[0]
                           for r in scarce])
        real_y = np.array([r.params["severity_grade"] for r in scarce], dtype=int)
        for arm, (x, y) in (("baseline", (real_x, real_y)),
                            ("augmented", (np.concatenate([real_x, syn_x]),
                                           np.concatenate([real_y, syn_y])))):
            model, _ = train_classifier(x, y, test_x, test_y,
                                        stable_seed(cfg.full_hash(), arm, seed),
                                        target_acc=2.0, **cfg.classifier)
            preds = []
            with T.no_grad():
                for s in range(0, len(test_x), 128):
                    _, logits = model.forward_batch(test_x[s:s + 128])
                    preds.append(np.argmax(logits.data, axis=1))
            results[arm].append({"seed": seed, **_stats(np.concatenate(preds))})

    def _median(arm: str, key: str) -> float:
        return float(np.median([r[key] for r in results[arm]]))

    summary = {k: {"accuracy": _median(k, "accuracy"), "macro_f1": _median(k, "macro_f1"),
                   "qwk": _median(k, "qwk")} for k in results}
    payload = {"config_hash": cfg.full_hash(), "runs": results, "median": summary,
               "n_synthetic": len(syn_y), "train_size": cfg.train_size}
    (out_dir / "downstream.json").write_text(canonical_json(payload) + "\n",
                                             encoding="utf-8")
    if cfg.ledger:
        RunLedger(cfg.ledger).append("downstream", {
            "config_hash": cfg.full_hash(), "median": summary,
            "wall_clock_s": round(time.monotonic() - t0, 3)})
    return payload


# ------------------------------------------------------------------ ablation


ABLATION_ROWS = (
    ("exp0", ()),                          # untrained baseline
    ("exp1", ("PT",)),
    ("exp2", ("PT", "PL")),
    ("exp3", ("PT", "PL", "SR")),
    ("exp4", ("PT", "PL", "HR")),
    ("exp5", ("PT", "PL", "SR", "HR")),
)


@dataclass
class AblationConfig:
    out_dir: str
    seed: int = 0
    n_images: int = 2000
    hr_n_images: int = 600
    corrupt_fraction: float = 0.2
    boilerplate_fraction: float = 0.3
    pt_steps: int = 600
    pl_steps: int = 600
    hr_steps: int = 300
    batch_size: int = 32
    hr_batch_size: int = 16
    lr: float = 3e-4
    eval_n_gen: int = 96
    sampler: dict = field(default_factory=dict)
    encoder_budget: dict = field(default_factory=dict)
    ledger: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "AblationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown ablation config keys: {sorted(unknown)}")
        return cls(**d)

    def full_hash(self) -> str:
        return config_hash(asdict(self))


def run_ablation(cfg: AblationConfig) -> dict:
    """Component ladder: {none, PT, PT+PL, PT+PL+SR, PT+PL+HR, all}.

    PT = pretraining, PL = prolonged training, SR = similarity filtering +
    caption refinement, HR = high-resolution fine-tune.  Training data carries
    caption corruption + boilerplate, so SR rows train on visibly cleaner
    pairs.  Shared prefixes are trained once and reused.  Returns a table of
    FID (val/test) and caption alignment per row.
    """
    t0 = time.monotonic()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed

    # corpora: clean manifests for eval + encoder, corrupted ones for training
    clean32 = build_manifest(cfg.n_images, stable_seed(seed, "m32"), out / "data32")
    noisy32 = inject_boilerplate(
        corrupt_captions(clean32, cfg.corrupt_fraction, stable_seed(seed, "c32")),
        cfg.boilerplate_fraction, stable_seed(seed, "b32"),
        out_path=out / "data32" / "manifest_noisy.jsonl")
    clean64 = build_manifest(cfg.hr_n_images, stable_seed(seed, "m64"),
                             out / "data64", resolution=64,
                             aspects=[(64, 64), (64, 48), (48, 64)],
                             aspect_fractions=[0.8, 0.1, 0.1])
    noisy64 = inject_boilerplate(
        corrupt_captions(clean64, cfg.corrupt_fraction, stable_seed(seed, "c64")),
        cfg.boilerplate_fraction, stable_seed(seed, "b64"),
        out_path=out / "data64" / "manifest_noisy.jsonl")

    encoder = train_dual_encoder(clean32, stable_seed(seed, "enc"),
                                 **cfg.encoder_budget)
    enc_path = out / "dual_encoder.fgck"
    save_dual_encoder(enc_path, encoder, {"seed": seed, "config_hash": cfg.full_hash()})

    extractor = train_feature_extractor(clean32, stable_seed(seed, "fx"))
    fx_path = out / "feature_extractor.fgck"
    save_feature_extractor(fx_path, extractor, {"seed": seed,
                                                "config_hash": cfg.full_hash()})

    def _curate(noisy_path: Path, tag: str) -> Path:
        res = stage2_curate(CurateConfig(
            manifest=str(noisy_path), out_dir=str(out / f"curated_{tag}"),
            seed=stable_seed(seed, "curate", tag),
            encoder_checkpoint=str(enc_path), ledger=cfg.ledger))
        return res["manifest"]

    def _train(tag: str, stage: str, manifest: Path, steps: int, res: int,
               batch: int, in_ckpt: Path | None) -> Path:
        sc = StageConfig(
            stage=stage, manifest=str(manifest),
            out_checkpoint=str(out / f"ckpt_{tag}.fgck"),
            seed=stable_seed(seed, "train", tag), resolution=res, steps=steps,
            batch_size=batch, lr=cfg.lr,
            in_checkpoint=None if in_ckpt is None else str(in_ckpt),
            checkpoint_every=10 ** 9, ledger=cfg.ledger)
        return stage1_pretrain(sc) if stage == "pretrain" else stage3_finetune(sc)

    rows: dict[str, dict] = {}
    ckpts: dict[str, Path] = {}
    failures: dict[str, str] = {}

    noisy32_path = out / "data32" / "manifest_noisy.jsonl"
    noisy64_path = out / "data64" / "manifest_noisy.jsonl"

    def _build_row(name: str, comps: tuple[str, ...]) -> Path:
        if not comps:
            vocab = Vocabulary.from_captions([r.caption for r in clean32.records],
                                             extra_words=grammar_tokens())
            bundle = build_generator(stable_seed(seed, "train"), vocab)
            path = out / "ckpt_exp0.fgck"
            save_generator(path, bundle, None, {
                "stage": "init", "seed": seed, "resolution": 32, "step": 0,
                "caption_dropout": 0.1, "config_hash": cfg.full_hash(), "refs": {}})
            return path
        train32 = _curate(noisy32_path, "32") if "SR" in comps else noisy32_path
        pt = ckpts.get("pt") or _train("pt", "pretrain", noisy32_path,
                                       cfg.pt_steps, 32, cfg.batch_size, None)
        ckpts["pt"] = pt
        if "PL" not in comps:
            return pt
        # prolonged training continues the shared PT prefix on the row's data
        pl_tag = "pl_sr" if "SR" in comps else "pl"
        if pl_tag not in ckpts:
            ckpts[pl_tag] = _train(pl_tag, "finetune", train32, cfg.pl_steps, 32,
                                   cfg.batch_size, pt)
        base = ckpts[pl_tag]
        if "HR" not in comps:
            return base
        hr_tag = f"hr_{pl_tag}"
        if hr_tag not in ckpts:
            train64 = _curate(noisy64_path, "64") if "SR" in comps else noisy64_path
            ckpts[hr_tag] = _train(hr_tag, "finetune", train64, cfg.hr_steps, 64,
                                   cfg.hr_batch_size, base)
        return ckpts[hr_tag]

    sampler = {"n_steps": 36, "guidance_scale": 2.0, **cfg.sampler}
    for name, comps in ABLATION_ROWS:
        try:
            ckpt = _build_row(name, comps)
            size = [64, 64] if "HR" in comps else [32, 32]
            ev = evaluate(EvalConfig(
                checkpoint=str(ckpt), manifest=str(out / "data32" / "manifest.jsonl"),
                extractor_checkpoint=str(fx_path), encoder_checkpoint=str(enc_path),
                out_dir=str(out / f"eval_{name}"), n_gen=cfg.eval_n_gen,
                seed=stable_seed(seed, "eval", name), size=size, sampler=sampler,
                kid_subsets=50, kid_subset_size=48, ledger=cfg.ledger))
            rows[name] = {
                "components": list(comps),
                "fid_val": ev["reports"]["val"]["fid"],
                "fid_test": ev["reports"]["test"]["fid"],
                "alignment": ev["reports"]["val"]["alignment_score"],
                "status": "ok"}
        except Exception as exc:  # a failed row must not sink the ladder
            failures[name] = f"{type(exc).__name__}: {exc}"
            rows[name] = {"components": list(comps), "fid_val": None,
                          "fid_test": None, "alignment": None, "status": "failed"}

    table = {"config_hash": cfg.full_hash(), "columns":
             ["components", "fid_val", "fid_test", "alignment", "status"],
             "rows": rows, "failures": failures}
    (out / "ablation.json").write_text(canonical_json(table) + "\n", encoding="utf-8")
    lines = [f"{'row':6s} {'components':20s} {'fid_val':>10s} {'fid_test':>10s} "
             f"{'alignment':>10s} status"]
    for name, r in rows.items():
        def _fmt(v):
            return "-" if v is None else f"{v:.4f}"
        lines.append(f"{name:6s} {'+'.join(r['components']) or 'none':20s} "
                     f"{_fmt(r['fid_val']):>10s} {_fmt(r['fid_test']):>10s} "
                     f"{_fmt(r['alignment']):>10s} {r['status']}")
    (out / "ablation.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if cfg.ledger:
        RunLedger(cfg.ledger).append("ablate", {
            "config_hash": cfg.full_hash(), "rows": rows,
            "wall_clock_s": round(time.monotonic() - t0, 3)})
    return table
