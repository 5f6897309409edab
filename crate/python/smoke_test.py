"""Smoke test of the o2sif Python module on a tiny synthetic benchmark.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/o2sif-*.whl
"""

import math
import os
import tempfile

import o2sif

TINY = """
[scenes]
n_train = 2
n_held_out = 1
size = 20
patch_size = 10
n_acquisitions = 2
seed = 5

[emulator]
degree = 2
n_samples = 600
n_holdout = 200

[pretrain]
n_scenes = 1
size = 20
patch_size = 5

[pretrain.schedule]
epochs = 3

[schedule]
epochs = 2
"""


def main():
    cfg = o2sif.ExperimentConfig.from_toml(TINY)
    assert cfg.epochs == 2
    assert "[scenes]" in cfg.to_toml()

    train, held = o2sif.simulate_benchmark(cfg)
    assert len(train) == 2 and len(held) == 1
    scene = held[0]
    assert (scene.height, scene.width) == (20, 20)
    assert len(scene.band_centers) == 40
    assert len(scene.pixel_radiance(0)) == 40
    truth = scene.truth_f740()
    assert len(truth) == 400

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "scene.sifc")
        scene.save(path)
        assert o2sif.Scene.load(path).truth_f740() == truth

    emu = o2sif.fit_emulator(cfg)
    assert emu.n_monomials == 55
    assert emu.input_names[0] == "rho740"
    assert emu.report["mean_rel"] > 0.0
    bands = emu.emulate([0.3, 0.0, 0.0, 1.0, 0.2, 1.5, 0.8, 0.0, 0.0])
    assert len(bands) == 16 and all(math.isfinite(b) for b in bands)

    model = o2sif.Model(cfg, emu, train)
    stats = model.pretrain(cfg)
    assert stats["validation_rmse"] > 0.0
    history = model.train(cfg, train)
    assert len(history) == 2 and all(math.isfinite(h["total"]) for h in history)

    maps = model.infer(scene)
    assert len(maps["f740"]) == 400
    metrics = model.evaluate(cfg, scene)
    assert -1.0 <= metrics["f740"]["r2"] <= 1.0
    assert o2sif.r2(truth, truth) == 1.0
    assert o2sif.mad(truth, truth) == 0.0
    assert model.n_parameters > 0

    try:
        emu.emulate([0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("wrong input length accepted")

    print("python smoke test passed:", {k: round(v, 4) for k, v in metrics["f740"].items()})


if __name__ == "__main__":
    main()
