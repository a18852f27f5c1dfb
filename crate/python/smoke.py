"""Exercise the extension end to end on a tiny configuration."""

import json
import math
import tempfile
from pathlib import Path

import lodisc

assert lodisc.kept_count(196, 0.7) == 59

kept, threshold = lodisc.select_pivotal([0.1, -2.0, 1.5, 0.3], 0.5)
assert kept == [2, 3] and threshold == 0.3

q = [[1.0, 0.0], [0.0, 1.0]]
loss = lodisc.info_nce(q, q, 0.2)
expected = -math.log(math.exp(5.0) / (math.exp(5.0) + 1.0))
assert abs(loss - expected) < 1e-9, loss
assert lodisc.info_nce([[1.0, 2.0]], [[3.0, 4.0]], 0.2) == 0.0

ret = lodisc.retrieve([[1.0, 0.0]], [0], [[1.0, 0.1], [0.0, 1.0]], [0, 1])
assert ret["rank1"] == 1.0 and ret["map"] == 1.0

data = lodisc.Dataset.synthetic(images_per_class=4, image_size=16)
data.normalize()
config = {
    "vit": {"image_size": 16, "patch_size": 8, "embed_dim": 16, "layers": 1, "heads": 2},
    "heads": {"hidden_dim": 16, "out_dim": 8},
    "train": {"batch_size": 4, "epochs": 2},
}
trainer = lodisc.Trainer(len(data), json.dumps(config))
report = trainer.train_epoch(data)
assert report["steps"] == 2 and math.isfinite(report["mean_loss"])
assert all(len(k) == 1 for k in trainer.last_masks())

with tempfile.TemporaryDirectory() as tmp:
    path = str(Path(tmp) / "run.ldsc")
    trainer.save(path)
    resumed = lodisc.Trainer.load(path)
    assert resumed.step == trainer.step == 2
    a = trainer.train_epoch(data)["mean_loss"]
    b = resumed.train_epoch(data)["mean_loss"]
    assert a == b, (a, b)

feats = trainer.features(data)
labels = data.labels()
probe = lodisc.linear_probe(feats, labels, feats, labels, epochs=5)
assert 0.0 <= probe["top1"] <= 1.0

try:
    lodisc.Trainer(8, json.dumps({"train": {"masking_ratio": 1.5}}))
except ValueError:
    pass
else:
    raise AssertionError("invalid ratio accepted")

print("smoke ok")
