#!/usr/bin/env python
# Post-training int8 quantization: fold batch-norm, calibrate activation
# ranges, run the integer graph and measure SQNR and EPE.

import numpy as np
from nanoflownet import quant, weights
from nanoflownet.losses import endpoint_error
from nanoflownet.stdc import build_nanoflownet, nanoflownet_s_config
from nanoflownet.synthetic import SyntheticCfg, generate_synthetic
from nanoflownet.train import TrainConfig, evaluate, make_batch, train

H, W = 48, 64
data = generate_synthetic(300, SyntheticCfg(height=H, width=W, max_displacement=3, octaves=(12, 6)), seed=0)
cfg = nanoflownet_s_config(input_height=H, input_width=W)
res = train(build_nanoflownet(cfg, rng=0), data, TrainConfig(epochs=30))
print("float val EPE %.4f" % res.best_val_epe)

calib = [make_batch(data[i:i + 8])[0] for i in range(0, 64, 8)]
qg = quant.quantize_network(res.graph, calib)
print("int8 weights for %d layers, int32 biases for %d" % (len(qg.weights), len(qg.biases)))

val = data[240:]
xs = [make_batch(val[i:i + 10])[0] for i in range(0, len(val), 10)]
s = quant.output_sqnr(res.graph, qg, xs)
print("SQNR %.2f dB (ratio %.1f)" % (s["mean_db"], s["mean_ratio"]))

errs = []
for i in range(0, len(val), 10):
    x, gt, _ = make_batch(val[i:i + 10])
    errs += [endpoint_error(p, g) for p, g in zip(qg.forward(x)["flow"], gt)]
print("EPE float %.4f  int8 %.4f" % (evaluate(res.graph, val), np.mean(errs)))

weights.save_checkpoint("demo_int8.nfnw", qg.tensors(), cfg.to_dict(), kind="int8")
print("wrote demo_int8.nfnw")
