"""
Training the dual-branch model on toy patterns
==============================================

Eight classes of geometric textures, 8 images each, reduced model size.
Takes about a minute on one CPU core.
"""

import math

import numpy as np

from svsec.data import ImageSet
from svsec.metrics import render_report
from svsec.model import SVSECModel, cross_entropy, reduced_config
from svsec.saliency import SaliencyMap, to_png_bytes
from svsec.synthetic import make_arrays
from svsec.train import SaliencyCache, TrainHyper, default_scorer, evaluate_model, train

images, labels, ids = make_arrays(num_classes=8, per_class=8, side=96, seed=0)
data = ImageSet(labels, ids, images=images)
print("images", images.shape, "labels", np.bincount(labels))

cfg = reduced_config(num_classes=8, side=96)
cache = SaliencyCache(default_scorer(cfg))
cache.warm(data)
smap = cache.get(ids[0], images[0])
print("saliency map", smap.shape, "range", smap.min(), smap.max())
open("saliency_0.png", "wb").write(to_png_bytes(SaliencyMap(smap, ids[0])))

fresh = SVSECModel(cfg)
loss0 = float(cross_entropy(fresh(images, cache.batch(ids, images)), labels).data)
print(f"initial loss {loss0:.4f}  (ln 8 = {math.log(8):.4f})")

# training set doubles as validation set: we want to see it memorised
result = train(data, data, cfg, TrainHyper(epochs=200, batch_size=16, lr=3e-3), cache=cache,
               on_epoch=lambda epoch, model, row: row["val_accuracy"] == 1.0)
for row in result.log[::10]:
    print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  acc {row['val_accuracy']:.3f}")
print("best epoch", result.best_epoch)

print(render_report([("reduced model", evaluate_model(result.model, data, cache))], "text"))
