"""
A small policy end to end
=========================

Train a narrow network on 64x64 scenes for 30 epochs, fit the label
mixture and score refined predictions on held-out scenes.  The full-size
run (128x128, default widths) takes a few minutes; see the README.
"""

from rgmp.argn import ArchConfig, TrainConfig, train_policy
from rgmp.gmm import em_fit
from rgmp.harness import SceneSpec, evaluate_policy, generate_dataset

spec = dict(width=64, height=64, radius_range=(3.0, 6.0))
train = generate_dataset(40, SceneSpec(seed=0, **spec))
test = generate_dataset(20, SceneSpec(seed=1, **spec))

arch = ArchConfig(widths=(8, 16, 16), patch=4, image_size=(64, 64))
cfg = TrainConfig(epochs=30, lr=1e-3, arch=arch)
result = train_policy(train.images, train.labels, cfg, callback=lambda e, loss, _: print(f"epoch {e + 1:2d} loss {loss:.5f}"))

theta, _ = em_fit(train.labels, k=6, seed=0)
for mode in ("nearest", "aggregate"):
    m = evaluate_policy(result.model, theta, test, mode=mode)
    print(f"{mode:9s} Acc_t {m.acc_t:.2f}  per-joint MAE {[round(v, 3) for v in m.joint_mae]}")
print(f"raw       Acc_t {evaluate_policy(result.model, None, test).acc_t:.2f}")
