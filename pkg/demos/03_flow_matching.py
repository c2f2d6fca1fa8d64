"""Rectified-flow training loop on a handful of phantoms.

Shows the linear interpolation identities, a short conditional training run,
and ODE sampling with and without guidance. Budgets are tiny; the point is
the moving parts, not image quality.
"""

from pathlib import Path

import numpy as np

from flowgen import SamplerConfig, Vocabulary, build_generator, build_manifest
from flowgen.data import load_split_images, save_image
from flowgen.flow import (TrainState, guided_velocity, interpolate,
                          make_batches, sample_ode, train_step)
from flowgen.optim import Adam
from flowgen.phantom import grammar_tokens
from flowgen.text import tokenize
from flowgen.util import spawn_rng

OUT = Path(__file__).parent / "out" / "flow_matching"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = spawn_rng(0, "flow-demo")

    # the straight path between noise and data
    x_star = rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32)
    eps = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    s = interpolate(x_star, eps, np.array([0.0, 1.0]))
    assert np.array_equal(s.x_t[0], eps[0]) and np.array_equal(s.x_t[1], x_star[1])
    assert np.array_equal(s.v_target, x_star - eps)
    print("interpolation endpoints and target velocity: exact")

    # a tiny corpus and model
    manifest = build_manifest(32, seed=3, out_dir=OUT / "data", resolution=32)
    records, images = load_split_images(manifest, "train")
    captions = [r.caption for r in records]
    vocab = Vocabulary.from_captions(captions, extra_words=grammar_tokens())
    bundle = build_generator(seed=5, vocab=vocab, model={
        "patch_size": 4, "d_model": 32, "n_layers": 2, "n_heads": 4,
        "d_text": 32, "max_patches": 64})

    params = bundle.dit.parameters() + bundle.text_encoder.parameters()
    opt = Adam(params, lr=1e-3)
    state = TrainState()
    step_rng = spawn_rng(5, "steps")
    for batch in make_batches(records, images, vocab, batch_size=8,
                              steps=40, rng=spawn_rng(5, "batches")):
        state = train_step(bundle.dit, bundle.text_encoder, batch, opt,
                           step_rng, state)
    losses = [l for _, l in state.losses]
    print(f"40 train steps: loss {losses[0]:.3f} -> {losses[-1]:.3f}")

    # unconditional field: Euler vs Heun on the learned velocity
    ids, mask = tokenize(captions[0], vocab)
    for method in ("euler", "heun"):
        vel = guided_velocity(bundle, np.stack([ids]), np.stack([mask]),
                              guidance_scale=2.0)
        img = sample_ode(vel, (1, 3, 32, 32),
                         SamplerConfig(n_steps=8, method=method, seed=1))
        save_image(OUT / f"sample_{method}.png", img[0])
        print(f"{method}: sampled in [-1,1], range "
              f"[{img.min():+.2f}, {img.max():+.2f}]")
    print(f"wrote samples under {OUT}")


if __name__ == "__main__":
    main()
