"""Quick end-to-end check of the extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/python`
or `maturin develop -m crates/python/Cargo.toml`, then run this file.
"""

import json
import math
import tempfile

import gcp_py


def main():
    assert gcp_py.soft_threshold(0.5, 0.2) == 0.3
    assert gcp_py.soft_threshold(-0.1, 0.2) == 0.0
    assert gcp_py.layer_flops(8, 3, 3, 16, 16) == 110592

    train, test = gcp_py.Dataset.synthetic(300, 200, seed=0)
    assert len(train) == 300 and len(test) == 200

    model = gcp_py.Model("resnet8", seed=0)
    full = model.cost("flops")
    losses = gcp_py.train_model(model, train, epochs=2, lr=0.05, batch_size=50)
    assert len(losses) == 2 and all(math.isfinite(l) for _, l in losses)

    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        again = gcp_py.Model.load(d)
        x = [0.1 * (i % 7) for i in range(2 * 3 * 32 * 32)]
        assert again.logits(x, [2, 3, 32, 32]) == model.logits(x, [2, 3, 32, 32])

    history = json.loads(
        gcp_py.prune(model, train, objective="flops", eta=0.5, iterations=2, finetune_epochs=1)
    )
    assert len(history["steps"]) == 2
    assert model.cost("flops") <= 0.5 * full + history["max_alpha"]

    small = model.materialize()
    assert gcp_py.evaluate(small, test) == gcp_py.evaluate(model, test)
    rows = lambda m: [line.split(",") for line in m.pattern_csv().splitlines()[1:]]
    # The materialized widths are the kept counts of the masked model.
    assert [r[2] for r in rows(small)] == [r[3] for r in rows(model)]
    assert small.kept_per_group() == model.kept_per_group()

    try:
        model.cost("latency")
    except gcp_py.GcpError as e:
        assert "latency" in str(e)
    else:
        raise AssertionError("latency objective without a table must fail")

    top1, top5 = gcp_py.evaluate(model, test)
    print(f"pruned {model!r}: top1 {top1:.3f} top5 {top5:.3f}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
