"""A small end-to-end run: joint training, then test-time adaptation.

The model is trained on clean synthetic images with cross-entropy plus the
IM clustering loss of projectors on blocks 1 and 2. At test time each
corrupted batch is handled on its own: restore the trained weights, take a
few Adam steps on the IM loss alone (labels never enter), predict, reset.

This uses a reduced config so it runs in about a minute; the CLI runs the
full default.

    python demos/train_and_adapt.py
"""

import numpy as np

from clust3 import AdaptConfig, DatasetSpec, ModelBundle, ModelSpec, TrainConfig, evaluate, generate_dataset, joint_train
from clust3.adapt import build_stream, run_ttt, summarize

train, test = generate_dataset(DatasetSpec(train_per_class=200, test_per_class=64))
model = ModelBundle(ModelSpec(heads=5), seed=0)
model, log = joint_train(model, train, test, TrainConfig(epochs=6))
for e in log:
    print(f"epoch {e['epoch']}  lr {e['lr']:.3f}  ce {e['loss_ce']:.3f}  im/head {e['im_mean']:+.3f}  "
          f"test acc {e['test_acc']:.3f}  H(Z) {e['test_h_marg']:.3f}")
print(f"clean accuracy {evaluate(model, test).accuracy:.3f}")

cfg = AdaptConfig(checkpoints=(1, 3, 5, 10, 20), max_batches=2)
stream = build_stream(test, ("gaussian_noise", "contrast", "blur"), (5,), seed=0, batch_size=128, max_batches=2)
result = run_ttt(model, stream, cfg)

print("\ncorruption      source   ptbn    tent    clust3 (best checkpoint)")
by = {(r["corruption"], r["method"], r["checkpoint"]): r["accuracy"] for r in result.rows}
for kind in ("gaussian_noise", "contrast", "blur"):
    print(f"{kind:15s} {by[(kind, 'source', 0)]:.3f}   {by[(kind, 'ptbn', 0)]:.3f}   "
          f"{by[(kind, 'tent', 'max')]:.3f}   {by[(kind, 'clust3', 'max')]:.3f}")

traces = [t for k, t in result.traces.items() if k[0] == "clust3"]
drop = np.mean([t.loss[0] - t.loss[10] for t in traces])
print(f"\nmean IM loss drop over 10 adaptation steps: {drop:.4f}")
print({m: round(v["mean_accuracy"], 3) for m, v in summarize(result.rows).items()})
