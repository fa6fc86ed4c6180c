# %% [markdown]
# # Training a protector and checking what it does
#
# A toy dataset is generated, the generator is trained briefly against a
# two-model mock ensemble, and the result is scored against a third model
# that never took part in training. Pass an iteration count as the first
# argument to train longer (the default 150 keeps this under a minute or two).

# %%
import sys
from pathlib import Path

import torch

from makeup3d.data import ToyFaceSpec, generate_toy_dataset
from makeup3d.face3d.io import save_image
from makeup3d.trainer import (
    FaceTensors,
    TrainConfig,
    attack_trend,
    load_generator,
    prepare_run,
    protect,
    read_loss_log,
    train,
)

torch.set_num_threads(1)
iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 150
root = Path("demo_out/train")
generate_toy_dataset(ToyFaceSpec(seed=0), root / "data")

# %% [markdown]
# ## Configuration
#
# Three mock embedders are built from independent seeds; ``holdout`` keeps
# ``mock2`` out of the attack loss so it can act as the unseen model.

# %%
cfg = TrainConfig(
    dataset=str(root / "data" / "manifest.json"),
    out_dir=str(root / "run"),
    iterations=iterations,
    checkpoint_interval=max(1, iterations // 3),
    bank={"kind": "mock", "k": 3, "seed": 0, "dim": 64, "holdout": "mock2", "crop": 0.6},
)
print("config hash", cfg.hash())

# %%
def progress(r):
    if r["iteration"] % 50 == 0:
        print(f"iter {r['iteration']:4d}  L_G {r['L_G']:.3f}  L_D {r['L_D']:.3f}  att {r['att']:.3f}")


state, final = train(cfg, progress=progress)
records = read_loss_log(root / "run" / "losses.jsonl")
first, last = attack_trend(records)
print(f"attack loss, first vs last 10% of iterations: {first:.3f} -> {last:.3f}")

# %% [markdown]
# ## Protecting the sources
#
# The final checkpoint is applied to every source with references used in
# turn. Cosine similarity to the target identity is compared before and
# after, for the training models and for the held-out one.

# %%
ds, bank, target, sources, refs = prepare_run(cfg)
gen, meta = load_generator(final)
faces = [FaceTensors.from_artifacts(ds.artifacts(r)) for r in ds.split("source")]
protected = torch.stack([protect(gen, f, refs[i % len(refs)]) for i, f in enumerate(faces)])
clean = torch.stack([f.image[0] for f in faces])

for m in bank:
    e0 = m.embed(target)[0]
    before, after = float((m.embed(clean) @ e0).mean()), float((m.embed(protected) @ e0).mean())
    tag = "held out" if m.name == bank.holdout else "training"
    print(f"{m.name} ({tag}): cosine to target {before:+.3f} -> {after:+.3f}")

out = root / "protected"
out.mkdir(exist_ok=True)
for rec, img in zip(ds.split("source")[:4], protected):
    save_image(img.permute(1, 2, 0).numpy(), out / f"{rec.name}.png")
print("example images in", out)
