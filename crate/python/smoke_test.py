"""Quick end-to-end check of the trajnet Python bindings.

Build first:  pip install --no-build-isolation -e crates/python
Run:          python3 python/smoke_test.py
"""

import json
import math
import sys
import tempfile

import trajnet

TINY = """
folds = 2
synth.baseline_ad = 6
synth.baseline_cn = 6
synth.longitudinal_cn = 8
synth.stable_mci = 6
synth.converted_mci = 6
netgen.node.steps_per_epoch = 2
netgen.edge.steps_per_epoch = 2
netgen.edge_val_batches = 1
netgen.node_val_size = 64
max_epochs = 2
eval.encoder_cv = false
"""


def check(cond, what):
    if not cond:
        print("FAIL", what)
        sys.exit(1)
    print("ok  ", what)


def helpers():
    v = trajnet.one_hot_gap(3)
    check(len(v) == 16 and v[2] == 1.0 and sum(v) == 1.0, "one_hot_gap")
    try:
        trajnet.one_hot_gap(0)
        check(False, "one_hot_gap(0) raises")
    except trajnet.ValidationError:
        check(True, "one_hot_gap(0) raises ValidationError")

    r = trajnet.compute_residual([1.0] * 256, [0.25] * 256)
    check(all(abs(x - 0.75) < 1e-6 for x in r), "compute_residual")

    check(trajnet.rank_edges([0.1, 0.9, 0.5, 0.9], 0.5) == [1, 3], "rank_edges ties by index")

    m = json.loads(trajnet.compute_metrics([0.9, 0.2, 0.7, 0.1], [True, False, False, False]))
    check(m["tp"] == 1 and m["fp"] == 1 and m["tn"] == 2 and m["fn"] == 0, "compute_metrics counts")
    m = json.loads(trajnet.compute_metrics([0.1, 0.2], [False, False]))
    check(m["sensitivity"] == "undefined", "undefined sensitivity")

    folds = trajnet.kfold_split([True] * 5 + [False] * 7, 3, 1)
    tests = sorted(i for _, t in folds for i in t)
    check(tests == list(range(12)), "kfold_split partitions")

    z = [[1.0, 0.0], [0.0, 1.0]]
    a = trajnet.contrastive_loss(z, z, 0.1)
    b = trajnet.contrastive_loss([[3.0 * x for x in r] for r in z], z, 0.1)
    check(math.isfinite(a) and abs(a - b) < 1e-5, "contrastive loss scale invariant")

    s = trajnet.pad_and_sample([1.0, 2.0, 3.0], 10, 0)
    check(len(s) == 10 and s[3:] == [0.0] * 7, "pad_and_sample pads")


def pipeline(root):
    cfg = trajnet.RunConfig(TINY)
    ws = trajnet.Workspace(root)
    try:
        ws.build_graphs(cfg)
        check(False, "build_graphs before netgen raises")
    except trajnet.DependencyError:
        check(True, "missing stage raises DependencyError")

    ws.synth(cfg)
    cohort = trajnet.generate_cohort(cfg, "longitudinal")
    check(len(cohort.records()) == 20, "longitudinal cohort size")
    check(len(cohort.abnormal_edges) == 111, "planted abnormal edges")

    ws.train_netgen(cfg)
    ws.build_graphs(cfg)
    ws.train_encoder(cfg)
    ws.train_vae(cfg)
    ws.train_rnn(cfg)
    preds = ws.predict(cfg)
    check(len(preds) == 12 and all(0.0 < p < 1.0 for _, p in preds), "predict probabilities")

    subjects = trajnet.load_dataset(f"{root}/graphs/longitudinal")
    net = subjects[0].visits()[0][2]
    check(len(net.node_features()) == 68 and len(net.edge_features()) == 2227, "network shape")

    enc = trajnet.GraphEncoder.load(f"{root}/encoder/model")
    f = enc.encode(net)
    vae = trajnet.AgingVae.load(f"{root}/vae/aging_vae")
    f2 = vae.predict(f, 1)
    check(len(f2) == 256 and all(math.isfinite(x) for x in f2), "ageing forecast")

    summary = json.loads(ws.interpret(cfg))
    check(summary["ranked_edges"] == 111, "interpretation ranks 5% of edges")
    report = json.loads(ws.evaluate(cfg))
    check("conversion" in report, "evaluation report")
    print("report at", ws.report())


if __name__ == "__main__":
    helpers()
    with tempfile.TemporaryDirectory() as d:
        pipeline(d)
    print("smoke test passed")
