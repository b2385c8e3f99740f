"""Dev exploration: desk-scale training outcomes for acceptance tuning."""
import json
import time

import numpy as np

from unrolled_mri.cs_baseline import CsConfig, cs_reconstruct
from unrolled_mri.data_metrics import (DatasetConfig, generate_dataset,
                                       inference_sweep, metric_set, psnr)
from unrolled_mri.train_strategies import TrainConfig, TrainData, train
from unrolled_mri.unrolled_nets import build_network

t_start = time.perf_counter()
cfg = DatasetConfig(height=64, width=64, coils=4,
                    counts={"train": 200, "val": 20, "test": 20},
                    acceleration=4.0, seed=7)
splits = generate_dataset(cfg)
tr, te = splits["train"], splits["test"]
model = tr.model(mu=4.0)
data = TrainData(refs=tr.refs, kspace=tr.kspace, model=model)
test_model = te.model(mu=4.0)

def evaluate(net, split):
    recon = net.forward_full(split.kspace)
    return float(np.mean([psnr(r, x) for r, x in zip(split.refs, recon)]))

STEPS = 2000
results = {}
nets = {}
for name, kind, n, m, strategy in [
    ("e2e_n4", "pgd", 4, 4, "e2e_bp"),
    ("gleam_n4", "pgd", 4, 4, "gleam"),
    ("gleam_n12", "pgd", 12, 3, "gleam"),
]:
    net = build_network(kind, model, n, m, features=8, seed=1)
    t0 = time.perf_counter()
    rep = train(net, data, TrainConfig(strategy=strategy, total_steps=STEPS,
                                       batch_size=2, seed=0))
    # networks trained on the train-split model; evaluate with the test split's
    # own sensing model by rebuilding forward with it
    net_test = build_network(kind, test_model, n, m, features=8, seed=1)
    for p_dst, p_src in zip(net_test.parameters(), net.parameters()):
        p_dst.value = p_src.value
    tr_psnr = evaluate(net, tr)
    te_psnr = evaluate(net_test, te)
    last = np.asarray(rep.loss_trace)[-1]
    results[name] = dict(test_psnr=te_psnr, train_psnr=tr_psnr,
                         minutes=(time.perf_counter() - t0) / 60,
                         final_loss=float(np.ravel(last)[-1]))
    nets[name] = net_test
    print(name, json.dumps(results[name]), flush=True)

# stage-wise sweep on gleam_n4 and e2e_n4
for name in ("gleam_n4", "e2e_n4"):
    rows = inference_sweep(nets[name], te)
    print(name, "sweep", [round(r["psnr"], 3) for r in rows], flush=True)

# CS baseline lambda sweep
for lam in (5e-4, 1e-3, 2e-3, 5e-3, 1e-2):
    recs = np.stack([cs_reconstruct(test_model, te.kspace[i],
                                    CsConfig(lam=lam, iterations=100))
                     for i in range(te.n_items)])
    ps = float(np.mean([psnr(r, x) for r, x in zip(te.refs, recs)]))
    print(f"cs lam={lam}: psnr {ps:.3f}", flush=True)

# zero-filled baseline for context
zf = float(np.mean([psnr(r, x) for r, x in
                    zip(te.refs, np.stack([nets['e2e_n4'].initial_image(te.kspace)[i] for i in range(te.n_items)]))]))
print(f"zero-filled psnr: {zf:.3f}")
print(f"total minutes: {(time.perf_counter()-t_start)/60:.1f}")
