"""
Which regions drive the diagnosis?
==================================

The contribution weight of a region is how much worse it is
reconstructed when the decoder is handed the wrong label. On a synthetic
cohort the answer is known in advance.
"""

from fmridgm import DgmHyper, RngStream, SynthConfig, contribution_weights, synth_generate, train
from fmridgm.dgm import frame_series, top_regions

cfg = SynthConfig(seed=2)
cohort = synth_generate(cfg)
print("planted regions:", [cohort.region_names[k] for k in cfg.discriminative_set])

model, _ = train(cohort, DgmHyper(n_x=cfg.n_x, n_h=32, n_z=4), RngStream(3))

# nested means: frames within subject, subjects within class, then classes
w = contribution_weights(model, cohort)
for rank, (k, name, v) in enumerate(top_regions(w, cohort.region_names, top=5), 1):
    print(f"{rank}. {name}  {v:+.4f}")

# per-frame view for one planted region of one patient
k = cfg.discriminative_set[0]
patient = cohort.of_class(1)[0]
trace = frame_series(model, patient.frames, patient.label, k)
print(f"{patient.subject_id}, region {cohort.region_names[k]}: mean weight {trace['weight'].mean():+.3f}")
print("first frames  signal / recon(true) / recon(wrong)")
for t in range(5):
    print(f"  {trace['signal'][t]:+.3f}  {trace['mean_correct'][t]:+.3f}  {trace['mean_incorrect'][t]:+.3f}")
