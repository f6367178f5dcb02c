#!/usr/bin/env python
# Build both presets, count parameters and MACs, and see what the
# pooled strided module saves compared with the plain strided one.

import numpy as np
from nanoflownet import analysis
from nanoflownet.stdc import build_nanoflownet, nanoflownet_config, nanoflownet_s_config, stack_frames

for cfg in (nanoflownet_config(), nanoflownet_s_config()):
    rep = analysis.analyze(cfg)
    print(analysis.format_report(rep))
    print()

# a forward pass on two random frames (112 x 160, grayscale)
g = build_nanoflownet(nanoflownet_s_config(), rng=0, training=False)
f0 = np.random.default_rng(0).random((112, 160))
f1 = np.roll(f0, 2, axis=1)  # everything moves 2 px right
flow = g.forward(stack_frames(f0, f1))["flow"][0]
print("flow field", flow.shape, "mean u %.4f (untrained weights)" % flow[..., 0].mean())

# the training graph carries an extra detail head; inference drops it for free
train_g = build_nanoflownet(nanoflownet_s_config(), rng=0, training=True)
print("params with detail head:", analysis.count_params(train_g))
print("params at inference:    ", analysis.count_params(train_g.inference_graph()))
