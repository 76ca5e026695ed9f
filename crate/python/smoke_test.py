"""Smoke test for the refocus Python extension.

Build and install first:  pip install maturin && maturin develop -m crates/py/Cargo.toml
"""
import math
import os
import tempfile

import refocus


def main():
    cfg = refocus.Config(overrides=[
        "data.train_per_class=4",
        "data.test_per_class=2",
        "train.epochs=2",
        "model.time_steps=4",
    ])
    train, test = refocus.generate(cfg)
    assert len(train) == 8 * 4 and len(test) == 8 * 2
    assert train[0].image.shape == [1, 1, 32, 32]

    model = refocus.Model(cfg, seed=3)
    rows = model.fit(train, test)
    assert [r["epoch"] for r in rows] == [1, 2]
    assert all(math.isfinite(r["train_loss"]) for r in rows)

    pred = model.predict(test[0])
    for key in ("global", "local", "fused"):
        assert abs(sum(pred[key]) - 1.0) < 1e-9
    assert len(pred["alphas"]) == 4

    maps = model.grad_cam(test[0], class_id=test[0].label)
    assert len(maps) == 4
    for m in maps:
        values = m.tolist()
        assert min(values) >= 0.0 and max(values) <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        back = refocus.Model.load(cfg, path)
        assert back.predict(test[0]) == pred
        try:
            refocus.Model.load(cfg.with_overrides(["model.time_steps=5"]), path)
        except ValueError as e:
            assert str(e).startswith("E_CHECKPOINT")
        else:
            raise AssertionError("mismatched checkpoint accepted")

    try:
        refocus.Config('{"no_such_key": 1}')
    except ValueError as e:
        assert str(e).startswith("E_CONFIG")
    else:
        raise AssertionError("unknown key accepted")

    print("smoke test ok:", model.parameter_count(), "parameters,", "eval", model.evaluate(test)["fused_acc"])


if __name__ == "__main__":
    main()
