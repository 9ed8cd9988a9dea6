"""Smoke test for the revformer Python module.

Build and install first:
    pip install maturin
    maturin develop -m crates/py/Cargo.toml --release
"""

import math
import os
import sys
import tempfile

import revformer as rv


def main() -> int:
    assert "rev_vit_b" in rv.presets()

    b = rv.cost_report(rv.Config.from_preset("rev_vit_b"))
    assert b["params"] == 87_335_656, b
    assert b["act_mem_cached"] > 5 * b["act_mem_reversible"], b

    a = rv.Tensor([2, 3], [1, 2, 3, 4, 5, 6])
    eye = rv.Tensor([3, 3], [1, 0, 0, 0, 1, 0, 0, 0, 1])
    assert (a @ eye).tolist() == a.tolist()
    s = a.softmax(1).tolist()
    assert abs(sum(s[:3]) - 1.0) < 1e-12

    cfg = rv.Config.from_preset("rev_vit_tiny")
    model = rv.Model(cfg)
    x = rv.Tensor.randn(model.input_shape(2), seed=1)
    logits = model.forward(x)
    assert logits.shape == [2, 8], logits.shape
    err = model.inversion_error(x, seed=5)
    assert err < 1e-10, err
    loss, grads = model.gradients(x, [0, 1])
    assert math.isfinite(loss) and len(grads) > 0
    assert all(math.isfinite(v) for _, g in grads for v in g.tolist())

    cfg = rv.Config.parse(
        '[model]\npreset = "rev_vit_tiny"\n'
        "[train]\nsteps = 3\nbatch = 4\n[train.data]\nsamples = 16\n"
    )
    with tempfile.TemporaryDirectory() as out:
        summary = rv.run_train(cfg, out)
        assert summary["steps"] == 3, summary
        ck = rv.Checkpoint.load(os.path.join(out, "checkpoint.rvt"))
        assert ck.step == 3 and ck.dtype == "f32"
        assert ck.param_names() == [n for n, _ in grads]

    try:
        rv.Config.parse("[model]\npreset = \"rev_vit_tiny\"\nwidth = 3\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
