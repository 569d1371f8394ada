"""Train a small model on synthetic boiling, then roll it out with and without reinit.

Takes a few minutes on one core.

    python demos/03_train_and_rollout.py [steps]
"""
import sys

from nucleus import levelset
from nucleus.datasets import GeneratorConfig, synth_generate
from nucleus.harness import TrainConfig, persistence_loss, rollout, samples_from, train, validation_loss

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
gen = GeneratorConfig()
train_set = [synth_generate(gen, s) for s in range(4)]
val_set = [synth_generate(gen, 100)]

cfg = TrainConfig(model=dict(P=4, D=32, L=2, E=4, k=2, radius=3), epochs=1000, max_steps=steps,
                  batch_size=8, peak_lr=3e-3, noise=False, seed=0)
log = []
ckpt = train(cfg, train_set, val_set, log)
for row in log[:: max(1, len(log) // 8)]:
    print(f"step {row['step']:4d}  loss {row['total']:8.2f}  lr {row['lr']:.2e}")

samples = samples_from(val_set, ckpt.config.F)
persist = persistence_loss(samples)["total"]
val = validation_loss(ckpt.build(), samples)["total"]
print(f"\nvalidation loss {val:.2f} vs persistence {persist:.2f} (ratio {val / persist:.3f})")

# Autoregressive rollout from the first frames of an unseen trajectory.
test = synth_generate(gen, 200)
F = ckpt.config.F
model = ckpt.build()
plain = rollout(model, test.data[:F], test.params, 30, truth=test.data[F:F + 30])
fixed = rollout(model, test.data[:F], test.params, 30, reinit=levelset.ROLLOUT_REINIT,
                truth=test.data[F:F + 30])
print("\nstep  eikonal plain  eikonal reinit  phi MAE plain  phi MAE reinit")
for s in (0, 9, 19, 29):
    print(f"{s + 1:4d}  {plain.eikonal[s]:13.4f}  {fixed.eikonal[s]:14.4f}  "
          f"{plain.mae[s, 3]:13.4f}  {fixed.mae[s, 3]:14.4f}")
