"""Smoke test for the mope_baf extension module.

Build first:
    cargo build --release -p mope-python
    cp target/release/libmope_baf.so python/mope_baf.so
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import mope_baf  # noqa: E402

TINY = """
[data]
task = "sarcasm2"
shots_per_class = 4
test_size = 32

[model]
hidden_dim = 8
n_heads = 2
ffn_dim = 16
stage1_layers = 2
stage2_layers = 1
vp_len = 2
lp_len = 2
vlp_len = 2
block_count = 2
vocab_size = 24
patch_feature_dim = 6
n_patches = 4
max_text_len = 8
init_std = 0.5

[train]
total_steps = 10
batch_size = 4
"""


def main():
    assert mope_baf.stage1_mask(1, 1, 1, 1) == [
        [True, False, True, False],
        [False, True, False, True],
        [True, False, True, True],
        [False, True, True, True],
    ]
    assert all(all(row) for row in mope_baf.stage2_mask(2, 3, 2))
    assert mope_baf.block_sizes(21, 6) == [4, 4, 4, 3, 3, 3]
    assert abs(mope_baf.learning_rate(20) - 3e-5) < 1e-12
    assert abs(mope_baf.learning_rate(110) - 1.5e-5) < 1e-12

    m = mope_baf.metrics([1, 1, 1, 0, 0, 0, 0, 0], [1, 1, 0, 1, 0, 0, 0, 0])
    assert m["accuracy"] == 0.75
    agg = mope_baf.aggregate([{"accuracy": 0.60}, {"accuracy": 0.64}])
    assert agg["summary"]["accuracy"] == "62.00 (2.00)"

    cfg = mope_baf.RunConfig.from_toml(TINY).with_seed(3)
    assert cfg.task == "sarcasm2"
    assert "fusion.0.fq" in cfg.parameter_names()
    err, worst = mope_baf.gradcheck(cfg)
    assert err <= 1e-4, (err, worst)

    try:
        mope_baf.RunConfig.from_toml("[model]\nbogus = 1\n")
    except ValueError as e:
        assert "bogus" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    run = mope_baf.train(cfg)
    assert len(run.trace) == 10
    best = run.best_checkpoint()
    assert best.evaluate("dev") == run.dev
    assert best.evaluate("test") == run.test

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "best.ckpt")
        best.save(path)
        again = mope_baf.Checkpoint.load(path)
        assert again.to_bytes() == best.to_bytes()
        assert again.parameters() == best.parameters()
        assert again.evaluate("test") == run.test

    print("test metrics:", run.test)
    print("mope_baf smoke test passed")


if __name__ == "__main__":
    main()
