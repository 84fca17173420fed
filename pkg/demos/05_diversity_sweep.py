"""Sweep the patient-diversity knob and watch accuracy degrade.

patient_sigma is swept across multiples of the class separation. As patient
clusters start to dominate class structure (the hallmark of diverse
anatomy), every head's median evaluation accuracy falls. The PCA variance
split confirms the cluster structure driving the drop.
"""
import numpy as np

from fslkit import EpisodeConfig, SynthSpec, TrainConfig, evaluate, synth_dataset, train
from fslkit.reporting import pca_project

SEP = 2.0
ecfg = EpisodeConfig(way=2, shot=5, query=10, num_query_patients=5)

print("median accuracy by diversity level (patient_sigma / class_separation):")
print(f"{'head':12s}  0.5x    1.5x    3.0x")
for head in ("protonet", "simpleshot", "relationnet", "matchingnet"):
    meds = []
    for mult in (0.5, 1.5, 3.0):
        spec = SynthSpec(11, 30, 16, SEP, mult * SEP, 1.0)
        ds = synth_dataset(spec, seed=100, name=f"div{mult}")
        tcfg = TrainConfig(train_episodes=400, eval_episodes=500, learning_rate=3e-3, seed=0)
        params, _ = train(head, ds, tcfg, ecfg)
        meds.append(evaluate(head, params, ds, tcfg, ecfg).median)
    print(f"{head:12s}  " + "   ".join(f"{m:.3f}" for m in meds))

print("\nPCA variance split on the most diverse level:")
ds = synth_dataset(SynthSpec(11, 30, 16, SEP, 3.0 * SEP, 1.0), seed=100, name="div3")
pc1 = pca_project(ds)[:, 0]
patients = np.array([r.patient_id for r in ds.records])
within = sum(
    float(((pc1[patients == p] - pc1[patients == p].mean()) ** 2).sum())
    for p in np.unique(patients)
)
between = sum(
    float((patients == p).sum() * (pc1[patients == p].mean() - pc1.mean()) ** 2)
    for p in np.unique(patients)
)
print(f"PC1 within-patient variance {within:.1f} vs between-patient {between:.1f}")
print("patient clusters dominate the leading axis" if between > within else "classes dominate")
