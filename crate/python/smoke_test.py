"""Smoke test for the docmsu extension module.

Build and install first:  pip install ./crates/python  (or: maturin develop -m crates/python/Cargo.toml)
"""

import math
import tempfile
from pathlib import Path

import docmsu


def check_metrics():
    assert math.isclose(docmsu.text_iou((2, 5), (4, 8)), 1 / 6)
    assert math.isclose(docmsu.text_iou((0, 2), (5, 8)), -3 / 8)
    assert math.isclose(docmsu.visual_iou((0, 0, 2, 2), (1, 0, 2, 2)), 1 / 3)

    ann = {"annotator_id": "a", "spans": [[1, 3]], "boxes": [[0, 0, 10, 10]]}
    triple = [dict(ann, annotator_id=n) for n in "abc"]
    report = docmsu.confidence_scores(triple)
    assert all(math.isclose(c, 4.0) for c in report["per_annotator"].values()), report
    assert docmsu.challenging([3.0, 1.0, 2.0, 4.0], 0.25) == [1]

    scores = docmsu.text_localization([([0, 1], [0, 1], 5), ([2], [3], 5)])
    assert math.isclose(scores["em"], 0.5), scores
    ap = docmsu.average_precision([[(0, 0, 10, 10, 0.9)]], [[(0, 0, 10, 10)]])
    assert math.isclose(ap, 1.0)
    det = docmsu.detection_metrics([0.9, 0.1, 0.8], [True, False, False])
    assert math.isclose(det["acc"], 2 / 3), det


def check_model(tmp: Path):
    data = docmsu.gen_fixtures(str(tmp / "fx"), n=12, seed=3, image_size=32)
    records = docmsu.load_dataset(data)
    assert len(records) == 12
    assert sum(r["sarcastic"] for r in records) == 4

    model = docmsu.Model("test", seed=1)
    assert model.parameter_count > 0
    history = model.fit(data, epochs=1, batch_size=4)
    assert history["steps"], history

    preds = model.predict(data)
    assert len(preds) == 12
    assert all(0.0 <= p["sarcasm_prob"] <= 1.0 for p in preds)
    report = docmsu.evaluate(preds, data)
    assert 0.0 <= report["acc"] <= 1.0

    ckpt = tmp / "model.safetensors"
    model.save(str(ckpt))
    again = docmsu.Model.load(str(ckpt))
    assert again.config == model.config
    assert again.predict(data) == preds

    try:
        docmsu.Model.load(str(tmp / "missing.safetensors"))
    except FileNotFoundError:
        pass
    else:
        raise AssertionError("loading a missing checkpoint should raise")


def main():
    check_metrics()
    with tempfile.TemporaryDirectory() as tmp:
        check_model(Path(tmp))
    print("docmsu", docmsu.__version__, "smoke test passed")


if __name__ == "__main__":
    main()
