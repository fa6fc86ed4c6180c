# %% [markdown]
# # Verification thresholds and protection metrics
#
# Attack success counts protected images that a model matches to the
# target identity; protection success counts images it no longer matches
# to their own source. Both hinge on a threshold fixed by a false
# acceptance rate on impostor pairs.

# %%
import numpy as np

from makeup3d.evaluation import asr_from_similarities, psr_from_similarities, rank_k_from_embeddings
from makeup3d.fr_bank import similarity_threshold

rng = np.random.default_rng(0)

# %% [markdown]
# ## Thresholds from impostor similarities
#
# With 1000 impostor similarities the threshold at FAR 0.01 is the value
# that exactly 10 of them exceed.

# %%
impostors = np.clip(rng.normal(0.05, 0.15, 1000), -1, 1)
for far in (0.001, 0.01, 0.1):
    tau = similarity_threshold(impostors, far)
    print(f"FAR {far:<6} tau {tau:+.3f}  accepted {np.mean(impostors > tau):.3f}")

# %% [markdown]
# ## Success rates
#
# A stricter threshold (lower FAR) can only lower the attack success rate
# and raise the protection success rate.

# %%
to_target = np.clip(rng.normal(0.35, 0.2, 200), -1, 1)
to_source = np.clip(rng.normal(0.45, 0.2, 200), -1, 1)
for far in (0.1, 0.01, 0.001):
    tau = similarity_threshold(impostors, far)
    print(f"FAR {far:<6} ASR {asr_from_similarities(to_target, tau):5.1f}%  "
          f"PSR {psr_from_similarities(to_source, tau):5.1f}%")

# %% [markdown]
# ## Identification
#
# Rank-k protection asks whether any of the k most similar gallery faces
# (ties go to the lower gallery index) shares the probe's identity.

# %%
ids = np.repeat(np.arange(10), 3)
centers = rng.normal(size=(10, 16))
gallery = centers[ids] + 0.3 * rng.normal(size=(30, 16))
probe_ids = rng.integers(0, 10, 100)
near = centers[probe_ids] + 0.3 * rng.normal(size=(100, 16))
disguised = centers[probe_ids] + 1.5 * rng.normal(size=(100, 16))
for k in (1, 5):
    print(f"rank-{k} protection: clean probes {rank_k_from_embeddings(near, gallery, ids, probe_ids, k):5.1f}%  "
          f"disguised {rank_k_from_embeddings(disguised, gallery, ids, probe_ids, k):5.1f}%")
