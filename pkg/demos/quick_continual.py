"""Small continual-adaptation comparison that finishes in well under a minute.

Trains a mini source encoder on 1000 synthetic images, warms up meta
networks, then streams three corruptions through each method.
"""

import numpy as np

from ecotta import adapt, benchcli, netzoo, stream

train = stream.gen_source(101, 1000)
pool = stream.gen_source(103, 500)

enc = adapt.train_source(netzoo.build_mini_encoder(0), train.images, train.labels, epochs=3, lr=0.1)
eco = netzoo.attach_meta(netzoo.copy_model(enc), netzoo.plan_partition(enc.spec, 4), calib=train.images[:256])
cfg = adapt.AdaptConfig(warmup_epochs=1)
adapt.warmup(eco, train.images, train.labels, cfg)

schedule = stream.make_schedule("continual", ["gaussian_noise", "contrast", "pixelate"], 5, 10)
for method in benchcli.METHODS:
    results, ad = benchcli.simulate(method, eco, schedule, pool, cfg)
    errs = " ".join(f"{r.corruption}={r.error:.3f}" for r in results)
    print(f"{method:8s} mean={np.mean([r.error for r in results]):.3f}  {errs}  act_bytes={results[-1].act_bytes}")
