"""Smoke test for the `lsla` extension module.

Build and run from the repository root:

    cargo build --release -p lsla-py --features extension-module
    cp target/release/liblsla.so python/lsla.so
    python3 python/smoke_test.py
"""

import math
import os
import random
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import lsla  # noqa: E402


def rand_tensor(rng, shape):
    n = math.prod(shape)
    return lsla.Tensor(list(shape), [rng.gauss(0.0, 1.0) for _ in range(n)])


def check_attention():
    rng = random.Random(0)
    cfg = lsla.AttentionConfig.lsla(8, 2, 7)
    assert cfg.tokens == 49 and cfg.variant == "qxx"
    params = lsla.AttentionParams.init(cfg, seed=1)
    assert "dynamic_scale" in params.names()
    x = rand_tensor(rng, [4, 49, 8])
    mask = lsla.build_shift_mask(14, 14, 7, 3)
    out, pre, post = lsla.attend_with_weights(cfg, params, x, mask)
    assert out.shape == [4, 49, 8]
    assert pre.shape == [4, 2, 49, 49]
    rows = pre.tolist()
    for r in range(0, len(rows), 49):
        assert abs(sum(rows[r:r + 49]) - 1.0) < 1e-12
    for w in range(4):
        for q in range(49):
            for k in range(49):
                if mask.is_excluded(w, q, k):
                    assert pre.tolist()[((w * 2) * 49 + q) * 49 + k] == 0.0
    assert lsla.attend(cfg, params, x, mask).max_abs_diff(out) == 0.0

    wq, wk = rand_tensor(rng, [5, 5]), rand_tensor(rng, [5, 5])
    assert lsla.construct_equivalent_qbar(wq, wk).shape == [5, 5]
    assert lsla.fuse_vo(wq, wk).shape == [5, 5]
    try:
        lsla.attend(cfg, params, rand_tensor(rng, [1, 48, 8]))
    except ValueError:
        pass
    else:
        raise AssertionError("bad token count accepted")


def check_costs():
    cfg = lsla.ModelConfig.preset("vit-lsla-t")
    report = lsla.cost_report(cfg)
    assert abs(report["total_params"] / 18.9e6 - 1) <= 0.05
    assert abs(report["total_flops"] / 3.5e9 - 1) <= 0.05
    qkv = lsla.cost_report(cfg.with_variant("qkv", True))
    assert qkv["total_params"] > report["total_params"]
    assert lsla.ModelConfig.from_text(cfg.to_text()).to_text() == cfg.to_text()
    try:
        lsla.ModelConfig.preset("bogus")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")


def check_verify():
    results = lsla.verify("rowsum.*")
    assert [name for name, _, _ in results] == ["rowsum.pre", "rowsum.post"]
    assert all(ok for _, ok, _ in results), results


def check_training():
    with tempfile.TemporaryDirectory() as root:
        n_train, n_eval, baseline = lsla.synth_dataset(root, per_class=16, size=28, seed=3)
        assert (n_train, n_eval) == (48, 16)
        assert 0.0 <= baseline <= 1.0
        cfg = lsla.ModelConfig.preset("micro")
        model, log = lsla.train(cfg, root, epochs=1, lr=1e-3, batch_size=16)
        assert len(log) == 1 and math.isfinite(log[0][1])
        acc = lsla.evaluate(model, os.path.join(root, "eval"))
        assert acc == log[0][2]
        path = os.path.join(root, "m.ckpt")
        model.save(path)
        again = lsla.Model.load(path)
        images = lsla.Tensor([2, 28, 28, 3], [0.5] * (2 * 28 * 28 * 3))
        assert again.forward(images).tolist() == model.forward(images).tolist()
        prof = again.inspect(images, 0, 0, 0, 3, 0)
        assert abs(sum(prof["attn_pre"]) - 1.0) < 1e-12
        try:
            again.inspect(images, 9, 0, 0, 0, 0)
        except IndexError:
            pass
        else:
            raise AssertionError("bad stage accepted")
        try:
            lsla.Model.load(os.path.join(root, "missing.ckpt"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint loaded")


if __name__ == "__main__":
    check_attention()
    check_costs()
    check_verify()
    check_training()
    print("python smoke test passed")
