"""Stage orchestration: artifacts, resume semantics, generation, evaluation."""

import json
from pathlib import Path

import numpy as np
import pytest

from flowgen import (DualEncoder, FeatureExtractor, SamplerConfig, Vocabulary,
                     build_manifest, corrupt_captions)
from flowgen.data import DatasetManifest, load_image
from flowgen.phantom import caption_from_params, grammar_tokens, sample_params
from flowgen.pipeline import (AblationConfig, CurateConfig, EvalConfig,
                              GenerateConfig, RunLedger, StageConfig,
                              _group_records, _scarce_subset, build_generator,
                              contact_sheet, downstream_augment, evaluate,
                              generate, load_dual_encoder,
                              load_feature_extractor, load_generator,
                              locked_dir, sample_images, save_dual_encoder,
                              save_feature_extractor, save_generator,
                              stage1_pretrain, stage2_curate, stage3_finetune)
from flowgen.util import ContractError, spawn_rng


@pytest.fixture(scope="module")
def manifest_path(small_manifest):
    return str(small_manifest.root / "manifest.jsonl")


@pytest.fixture(scope="module")
def tiny_model_dict(tiny_model_config):
    return tiny_model_config.to_dict()


@pytest.fixture(scope="module")
def stage1_ckpt(tmp_path_factory, manifest_path, tiny_model_dict):
    """A real (if barely trained) stage-1 checkpoint shared by later tests."""
    root = tmp_path_factory.mktemp("stage1")
    cfg = StageConfig(stage="pretrain", manifest=manifest_path,
                      out_checkpoint=str(root / "ckpt.fgck"), seed=11,
                      steps=6, batch_size=16, checkpoint_every=100,
                      loss_log_every=2, model=tiny_model_dict,
                      ledger=str(root / "ledger.jsonl"))
    return stage1_pretrain(cfg)


@pytest.fixture(scope="module")
def stub_checkpoints(tmp_path_factory, small_manifest):
    """Dual encoder + feature extractor with random weights but trained flags,
    enough to exercise evaluation plumbing."""
    root = tmp_path_factory.mktemp("stubs")
    vocab = Vocabulary.from_captions([r.caption for r in small_manifest.records],
                                     extra_words=grammar_tokens())
    enc = DualEncoder(spawn_rng(0, "stub-enc"), vocab)
    enc.trained = True
    enc_path = root / "encoder.fgck"
    save_dual_encoder(enc_path, enc, {"seed": 0})
    fx = FeatureExtractor(spawn_rng(0, "stub-fx"))
    fx.trained = True
    fx_path = root / "extractor.fgck"
    save_feature_extractor(fx_path, fx, {"seed": 0})
    return {"encoder": enc_path, "extractor": fx_path}


# ---- plumbing ----

def test_run_ledger_appends_parseable_lines(tmp_path):
    ledger = RunLedger(tmp_path / "ledger.jsonl")
    ledger.append("a", {"x": 1})
    ledger.append("b", {"y": [1, 2], "wall_clock_s": 0.5})
    lines = (tmp_path / "ledger.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[0])["kind"] == "a"
    assert json.loads(lines[1])["wall_clock_s"] == 0.5


def test_locked_dir_exclusive(tmp_path):
    target = tmp_path / "out"
    with locked_dir(target):
        assert (target / ".lock").exists()
        with pytest.raises(ContractError, match="locked"):
            with locked_dir(target):
                pass
    assert not (target / ".lock").exists()


def test_locked_dir_releases_on_error(tmp_path):
    target = tmp_path / "out"
    with pytest.raises(RuntimeError):
        with locked_dir(target):
            raise RuntimeError("boom")
    assert not (target / ".lock").exists()


# ---- model IO ----

def test_generator_roundtrip_bitwise(tmp_path, tiny_model_config):
    vocab = Vocabulary.from_captions(["left eye", "right eye"],
                                     extra_words=grammar_tokens())
    bundle = build_generator(3, vocab, tiny_model_config)
    path = tmp_path / "gen.fgck"
    save_generator(path, bundle, None, {"stage": "test"})
    loaded, opt_arrays = load_generator(path)
    assert opt_arrays == {}
    for name, arr in bundle.arrays().items():
        np.testing.assert_array_equal(loaded.arrays()[name], arr)
    assert loaded.vocab.content_hash() == vocab.content_hash()
    assert loaded.metadata["stage"] == "test"


def test_checkpoint_kind_is_enforced(tmp_path, small_manifest):
    vocab = Vocabulary.from_captions([r.caption for r in small_manifest.records])
    enc = DualEncoder(spawn_rng(0, "kind"), vocab)
    path = tmp_path / "enc.fgck"
    save_dual_encoder(path, enc, {})
    with pytest.raises(ContractError, match="not a generator"):
        load_generator(path)
    with pytest.raises(ContractError, match="not a feature-extractor"):
        load_feature_extractor(path)


def test_dangling_refs_detected(tmp_path, tiny_model_config):
    from flowgen.pipeline import _ref
    dep = tmp_path / "dep.txt"
    dep.write_text("payload")
    vocab = Vocabulary.from_captions(["left eye"])
    bundle = build_generator(0, vocab, tiny_model_config)
    path = tmp_path / "gen.fgck"
    save_generator(path, bundle, None, {"refs": {"dep": _ref(dep)}})
    load_generator(path)                       # intact refs pass
    dep.write_text("tampered")
    with pytest.raises(ContractError, match="modified"):
        load_generator(path)
    assert load_generator(path, verify=False)  # opt-out skips the check
    dep.unlink()
    with pytest.raises(ContractError, match="missing"):
        load_generator(path)


# ---- configs ----

def test_stage_config_contracts(manifest_path):
    with pytest.raises(ContractError, match="unknown stage config keys"):
        StageConfig.from_dict({"stage": "pretrain", "manifest": manifest_path,
                               "out_checkpoint": "x", "bogus": 1})
    with pytest.raises(ContractError, match="unknown stage"):
        StageConfig(stage="stage7", manifest=manifest_path, out_checkpoint="x")
    with pytest.raises(ContractError):
        StageConfig(stage="pretrain", manifest=manifest_path,
                    out_checkpoint="x", steps=0)
    with pytest.raises(ContractError, match="unknown ablation config keys"):
        AblationConfig.from_dict({"out_dir": "x", "nope": True})


# ---- record grouping ----

def test_group_records_partitions_by_padded_size(tmp_path, small_manifest):
    mixed = build_manifest(12, seed=21, out_dir=tmp_path / "mixed",
                           aspects=[(32, 32), (24, 32)],
                           aspect_fractions=[0.5, 0.5])
    vocab = Vocabulary.from_captions([r.caption for r in mixed.records],
                                     extra_words=grammar_tokens())
    groups = _group_records(mixed, mixed.records, 4, 32, vocab)
    sizes = sorted({g["size"] for g in groups})
    assert sizes == sorted({(r.size[0], r.size[1]) for r in mixed.records})
    seen = [rec.id for g in groups for rec in g["records"]]
    assert sorted(seen) == sorted(r.id for r in mixed.records)
    for g in groups:
        n = len(g["records"])
        assert g["images"].shape[0] == n and g["images"].shape[1] == 3
        assert g["images"].shape[2] % 4 == 0 and g["images"].shape[3] % 4 == 0
        assert g["ids"].shape[0] == n and g["mask"].shape == g["ids"].shape
        assert g["pixel_mask"].shape == (n,) + g["images"].shape[2:]
        assert g["pad_mask"].shape[0] == n


# ---- training runs ----

def test_stage1_writes_checkpoint_and_ledger(stage1_ckpt):
    assert stage1_ckpt.exists()
    bundle, opt_arrays = load_generator(stage1_ckpt)
    assert bundle.metadata["stage"] == "pretrain"
    assert bundle.metadata["step"] == 6
    assert opt_arrays                          # optimizer state travels along
    ledger_lines = (stage1_ckpt.parent / "ledger.jsonl").read_text().splitlines()
    entry = json.loads(ledger_lines[-1])
    assert entry["kind"] == "train.stage1" and entry["steps"] == 6
    assert all(l is None or np.isfinite(l) for _, l in entry["loss_samples"])


def test_stage1_rerun_is_byte_identical(tmp_path, manifest_path, tiny_model_dict):
    cfg = dict(stage="pretrain", manifest=manifest_path,
               out_checkpoint=str(tmp_path / "ckpt.fgck"), seed=4, steps=3,
               batch_size=8, checkpoint_every=100, model=tiny_model_dict)
    path = stage1_pretrain(StageConfig(**cfg))
    first = path.read_bytes()
    path2 = stage1_pretrain(StageConfig(**cfg))   # finished run retrains
    assert path2.read_bytes() == first


def test_stage1_resume_matches_uninterrupted_run(tmp_path, manifest_path,
                                                 tiny_model_dict):
    common = dict(stage="pretrain", manifest=manifest_path, seed=4,
                  out_checkpoint=str(tmp_path / "ckpt.fgck"),
                  batch_size=8, checkpoint_every=3, model=tiny_model_dict)
    stage1_pretrain(StageConfig(steps=3, **common))       # interrupted run
    resumed = stage1_pretrain(StageConfig(steps=6, **common)).read_bytes()
    (tmp_path / "ckpt.fgck").unlink()
    straight = stage1_pretrain(StageConfig(steps=6, **common)).read_bytes()
    assert resumed == straight


def test_stage1_refuses_foreign_checkpoint(tmp_path, manifest_path,
                                           tiny_model_dict):
    cfg = dict(stage="pretrain", manifest=manifest_path,
               out_checkpoint=str(tmp_path / "ckpt.fgck"), steps=2,
               batch_size=8, model=tiny_model_dict)
    stage1_pretrain(StageConfig(seed=1, **cfg))
    with pytest.raises(ContractError, match="different configuration"):
        stage1_pretrain(StageConfig(seed=2, **cfg))


def test_stage3_contracts(tmp_path, manifest_path, stage1_ckpt, tiny_model_dict):
    with pytest.raises(ContractError, match="in_checkpoint"):
        stage3_finetune(StageConfig(stage="finetune", manifest=manifest_path,
                                    out_checkpoint=str(tmp_path / "o.fgck")))
    with pytest.raises(ContractError, match="below pretrain resolution"):
        stage3_finetune(StageConfig(stage="finetune", manifest=manifest_path,
                                    out_checkpoint=str(tmp_path / "o.fgck"),
                                    in_checkpoint=str(stage1_ckpt),
                                    resolution=16, steps=2))
    big = build_manifest(10, seed=9, out_dir=tmp_path / "big", resolution=64)
    with pytest.raises(ContractError, match="grid capacity"):
        stage3_finetune(StageConfig(stage="finetune",
                                    manifest=str(big.root / "manifest.jsonl"),
                                    out_checkpoint=str(tmp_path / "o.fgck"),
                                    in_checkpoint=str(stage1_ckpt),
                                    resolution=64, steps=2))


def test_stage3_continues_training(tmp_path, manifest_path, stage1_ckpt):
    out = stage3_finetune(StageConfig(stage="finetune", manifest=manifest_path,
                                      out_checkpoint=str(tmp_path / "ft.fgck"),
                                      in_checkpoint=str(stage1_ckpt),
                                      seed=12, steps=3, batch_size=8,
                                      checkpoint_every=100))
    bundle, _ = load_generator(out)
    assert bundle.metadata["stage"] == "finetune"
    assert bundle.metadata["step"] == 3
    assert "stage1_checkpoint" in bundle.metadata["refs"]
    init, _ = load_generator(stage1_ckpt)
    diffs = [np.abs(bundle.arrays()[k] - init.arrays()[k]).max()
             for k in init.arrays()]
    assert max(diffs) > 0                      # weights actually moved


# ---- curation stage ----

def test_stage2_curate_writes_report(tmp_path, small_manifest, stub_checkpoints):
    corrupted_path = small_manifest.root / "manifest_corrupt_pipe.jsonl"
    corrupt_captions(small_manifest, 0.25, seed=3, out_path=corrupted_path)
    res = stage2_curate(CurateConfig(
        manifest=str(corrupted_path), out_dir=str(tmp_path / "curated"),
        encoder_checkpoint=str(stub_checkpoints["encoder"]),
        threshold=-1.0, calibrate=False))
    curated = DatasetManifest.load(res["manifest"])
    assert len(curated.records) == len(small_manifest.records)  # thr -1 keeps all
    assert "curation" in curated.provenance
    report = json.loads((tmp_path / "curated" / "filter_report.json").read_text())
    assert set(report["kept_ids"]) | set(report["dropped_ids"]) == \
        {r.id for r in small_manifest.records}
    assert report["encoder"]["sha256"]


def test_stage2_requires_an_encoder(tmp_path, manifest_path):
    with pytest.raises(ContractError, match="encoder"):
        stage2_curate(CurateConfig(manifest=manifest_path,
                                   out_dir=str(tmp_path / "c")))


# ---- sampling and generation ----

def test_sample_images_empty_and_deterministic(small_manifest, tiny_model_config):
    vocab = Vocabulary.from_captions([r.caption for r in small_manifest.records],
                                     extra_words=grammar_tokens())
    bundle = build_generator(5, vocab, tiny_model_config)
    sampler = SamplerConfig(n_steps=3)
    assert sample_images(bundle, [], 0, sampler).shape == (0, 3, 32, 32)
    caps = [small_manifest.records[0].caption] * 2
    a = sample_images(bundle, caps, seed=9, sampler=sampler)
    b = sample_images(bundle, caps, seed=9, sampler=sampler)
    np.testing.assert_array_equal(a, b)
    shifted = sample_images(bundle, caps, seed=9, sampler=sampler, start_index=2)
    assert not np.array_equal(a, shifted)
    assert a.min() >= -1.0 and a.max() <= 1.0


def test_sample_images_warns_on_unknown_caption(small_manifest, tiny_model_config):
    vocab = Vocabulary.from_captions([r.caption for r in small_manifest.records])
    bundle = build_generator(5, vocab, tiny_model_config)
    with pytest.warns(UserWarning, match="all-unknown"):
        sample_images(bundle, ["qwerty zxcvb"], 0, SamplerConfig(n_steps=1))


def test_generate_sidecars_and_replay(tmp_path, stage1_ckpt):
    caps = ["left eye, optic disc nasal, shallow cupping, 8 vessels, "
            "no lesions, severity grade 0",
            "right eye, optic disc temporal, deep cupping, 11 vessels, "
            "6 lesions, severity grade 3"]
    cfg = dict(checkpoint=str(stage1_ckpt), captions=caps, n=3, seed=5,
               sampler={"n_steps": 3})
    paths = generate(GenerateConfig(out_dir=str(tmp_path / "a"), **cfg))
    assert [p.name for p in paths] == ["gen_00000.png", "gen_00001.png",
                                       "gen_00002.png"]
    side = json.loads(paths[1].with_suffix(".json").read_text())
    assert side["caption"] == caps[1] and side["seed"] == 5
    assert side["sampler"]["n_steps"] == 3
    again = generate(GenerateConfig(out_dir=str(tmp_path / "b"), **cfg))
    for p, q in zip(paths, again):
        assert p.read_bytes() == q.read_bytes()


def test_generate_zero_and_missing_captions(tmp_path, stage1_ckpt):
    assert generate(GenerateConfig(checkpoint=str(stage1_ckpt),
                                   out_dir=str(tmp_path / "z"), n=0)) == []
    with pytest.raises(ContractError, match="caption"):
        generate(GenerateConfig(checkpoint=str(stage1_ckpt),
                                out_dir=str(tmp_path / "z"), n=1))
    with pytest.raises(ContractError, match="n must be"):
        GenerateConfig(checkpoint=str(stage1_ckpt), out_dir="z", n=-1) and \
            generate(GenerateConfig(checkpoint=str(stage1_ckpt),
                                    out_dir=str(tmp_path / "z"), n=-1))


def test_contact_sheet_grid(tmp_path):
    imgs = np.full((7, 3, 32, 32), 0.5, dtype=np.float32)
    out = tmp_path / "sheet.png"
    contact_sheet(imgs, out, cols=5, gap=2)
    from PIL import Image
    with Image.open(out) as im:
        assert im.size == (5 * 32 + 4 * 2, 2 * 32 + 2)
    with pytest.raises(ContractError):
        contact_sheet(np.zeros((0, 3, 8, 8), dtype=np.float32), out)


# ---- evaluation ----

def test_evaluate_writes_metric_reports(tmp_path, manifest_path, stage1_ckpt,
                                        stub_checkpoints):
    payload = evaluate(EvalConfig(
        checkpoint=str(stage1_ckpt), manifest=manifest_path,
        extractor_checkpoint=str(stub_checkpoints["extractor"]),
        encoder_checkpoint=str(stub_checkpoints["encoder"]),
        out_dir=str(tmp_path / "eval"), n_gen=8, seed=2,
        sampler={"n_steps": 2}, kid_subsets=4, kid_subset_size=4))
    for split in ("val", "test"):
        rep = payload["reports"][split]
        assert rep["fid"] >= 0 and rep["inception_score"] >= 1.0
        assert rep["n_gen"] == 8
    assert (tmp_path / "eval" / "metrics.json").exists()
    assert (tmp_path / "eval" / "contact_sheet.png").exists()


# ---- downstream experiment ----

def test_scarce_subset_stratified_and_deterministic(small_manifest):
    train = small_manifest.split("train")
    sub = _scarce_subset(train, 20, seed=1)
    assert len(sub) == 20
    assert [r.id for r in sub] == [r.id for r in _scarce_subset(train, 20, seed=1)]
    grades = {r.params["severity_grade"] for r in sub}
    assert grades == {r.params["severity_grade"] for r in train}


def test_downstream_median_table(tmp_path, manifest_path, stage1_ckpt):
    rng = spawn_rng(3, "caps")
    caps = [caption_from_params(sample_params(rng)) for _ in range(6)]
    syn_dir = tmp_path / "syn"
    generate(GenerateConfig(checkpoint=str(stage1_ckpt), out_dir=str(syn_dir),
                            captions=caps, n=6, seed=8, sampler={"n_steps": 2}))
    from flowgen.pipeline import DownstreamConfig
    payload = downstream_augment(DownstreamConfig(
        real_manifest=manifest_path, synthetic_dir=str(syn_dir),
        out_dir=str(tmp_path / "down"), train_size=20, seeds=[0],
        classifier={"max_steps": 2, "eval_every": 1, "batch_size": 8}))
    assert payload["n_synthetic"] == 6
    for arm in ("baseline", "augmented"):
        assert len(payload["runs"][arm]) == 1
        assert set(payload["median"][arm]) == {"accuracy", "macro_f1", "qwk"}
    assert (tmp_path / "down" / "downstream.json").exists()


def test_load_synthetic_requires_images(tmp_path):
    from flowgen.pipeline import _load_synthetic
    with pytest.raises(ContractError, match="no generated images"):
        _load_synthetic(tmp_path)
