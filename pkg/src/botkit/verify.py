"""The invariant battery behind ``botkit verify``.

Each check returns ``(passed, detail)``. Checks look up the functions they
exercise through their modules at call time, so a patched implementation is
what gets verified.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attention, botnet, checkpoint, ensemble, functional as F, metrics, oracles, sam
from .data import dataset, splits, volumes
from .gradcheck import grad_check, grad_check_report
from .tensor import Tensor

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def check_conv_oracle():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    got = F.conv2d(_t(x), _t(w), _t(b), stride=2, padding=1).data
    err = float(np.max(np.abs(got - oracles.naive_conv2d(x, w, b, 2, 1))))
    return err <= 1e-12, f"max abs err {err:.1e}"


def check_pool_oracles():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 1, 6, 6))
    e1 = float(np.max(np.abs(F.max_pool2d(_t(x), 3, 2).data - oracles.naive_max_pool2d(x, 3, 2))))
    x2 = rng.normal(size=(1, 2, 4, 4))
    e2 = float(np.max(np.abs(F.avg_pool2d(_t(x2), 2, 2).data - oracles.naive_avg_pool2d(x2, 2, 2))))
    return max(e1, e2) <= 1e-12, f"max {e1:.1e}, avg {e2:.1e}"


def check_softmax():
    rng = np.random.default_rng(2)
    e = rng.normal(size=(4, 5, 5)) * 3
    p = F.softmax(_t(e), axis=-1).data
    shifted = F.softmax(_t(e + 7.5), axis=-1).data
    sums = float(np.max(np.abs(p.sum(axis=-1) - 1)))
    shift = float(np.max(np.abs(p - shifted)))
    ok = sums <= 1e-9 and shift <= 1e-9 and np.all(p > 0)
    return ok, f"row-sum err {sums:.1e}, shift err {shift:.1e}"


def check_op_gradients():
    rng = np.random.default_rng(3)
    errs = {}
    w = _t(rng.normal(size=(3, 2, 3, 3)))
    errs["conv2d"] = grad_check(lambda x: (F.conv2d(x, w, stride=2, padding=1) ** 2).sum(), _t(rng.normal(size=(1, 2, 5, 5)), True))
    errs["max_pool2d"] = grad_check(lambda x: (F.max_pool2d(x, 3, 2, padding=1) ** 2).sum(), _t(rng.normal(size=(1, 2, 6, 6)), True))
    errs["avg_pool2d"] = grad_check(lambda x: (F.avg_pool2d(x, 2, 2) ** 2).sum(), _t(rng.normal(size=(1, 2, 4, 4)), True))
    g, b = _t(rng.normal(size=2) + 1.0), _t(rng.normal(size=2))
    rm, rv = np.zeros(2), np.ones(2)
    c = _t(rng.normal(size=(2, 2, 3, 3)))
    errs["batch_norm2d"] = grad_check(
        lambda x: (F.batch_norm2d(x, g, b, rm, rv, True, update_stats=False) * c).sum(),
        _t(rng.normal(size=(2, 2, 3, 3)), True),
    )
    lw, lb = _t(rng.normal(size=(4, 3))), _t(rng.normal(size=3))
    errs["linear+relu"] = grad_check(lambda x: (F.relu(F.linear(x, lw, lb)) ** 2).sum(), _t(rng.normal(size=(5, 4)), True))
    labels = rng.integers(0, 2, size=6)
    errs["cross_entropy"] = grad_check(lambda z: F.cross_entropy(z, labels), _t(rng.normal(size=(6, 2)), True))
    errs["softmax"] = grad_check(lambda z: (F.softmax(z, axis=1) * c.data[0, 0]).sum(), _t(rng.normal(size=(3, 3)), True))
    worst = max(errs, key=errs.get)
    return errs[worst] < GRAD_TOL, f"worst {worst} {errs[worst]:.1e}"


def _small_layer(seed=4, heads=2, size=3, channels=8, value_relative=False):
    cfg = attention.MhsaConfig(channels, heads, value_relative)
    return attention.MhsaLayer(cfg, size, size, rng=np.random.default_rng(seed))


def check_mhsa_gradient():
    rng = np.random.default_rng(5)
    layer = _small_layer(size=4, heads=2)
    c = _t(rng.normal(size=(1, 8, 4, 4)))
    x0 = rng.normal(size=(1, 8, 4, 4))

    def loss_x(x):
        return (attention.mhsa2d_forward(x, layer) * c).sum()

    errs = {"x": grad_check(loss_x, _t(x0, True))}
    fixed = _t(x0)
    for name, p in (("rh", layer.rh), ("rw", layer.rw), ("wq[0]", layer.wq[0]), ("wk[1]", layer.wk[1]), ("wv[0]", layer.wv[0])):
        errs[name] = grad_check(lambda _p: (attention.mhsa2d_forward(fixed, layer) * c).sum(), p)
    worst = max(errs, key=errs.get)
    return errs[worst] < GRAD_TOL, f"worst {worst} {errs[worst]:.1e}"


def check_mhsa_oracle():
    rng = np.random.default_rng(6)
    layer = _small_layer()
    x = rng.normal(size=(1, 8, 3, 3))
    err = float(np.max(np.abs(attention.mhsa2d_forward(_t(x), layer).data - oracles.layer_brute_force(x, layer))))
    layer.rh.data[:] = 0
    layer.rw.data[:] = 0
    err0 = float(np.max(np.abs(attention.mhsa2d_forward(_t(x), layer).data - oracles.layer_brute_force(x, layer, use_positions=False))))
    return err <= 1e-10 and err0 <= 1e-12, f"brute force {err:.1e}, content-only {err0:.1e}"


def check_stage_shapes():
    model = botnet.build_botnet50(botnet.BotNet50Config(), seed=0).eval()
    logits, feats = model(np.random.default_rng(7).normal(size=(1, 3, 224, 224)), return_stages=True)
    sizes = [feats[s].shape[-1] for s in ("c1", "c2", "c3", "c4", "c5")]
    n_mhsa = len(model.mhsa_layers())
    ok = sizes == [112, 56, 28, 14, 7] and logits.shape == (1, 2) and n_mhsa == 3
    return ok, f"stages {sizes}, logits {logits.shape}, mhsa layers {n_mhsa}"


def check_param_count():
    got = botnet.build_botnet50(botnet.BotNet50Config()).num_parameters()
    want = oracles.botnet50_param_count()
    return got == want, f"built {got}, closed form {want}"


def end_to_end_reports(seed=8, h=1e-7):
    """Gradient-check reports for the input and a spread of parameters of a width-1/8 model.

    A freshly initialised ReLU network is kinky enough that +-1e-5 steps on
    early weights routinely cross activation boundaries, so the end-to-end
    check uses a smaller step and drops (and counts) probes whose finite
    differences are not self-consistent.
    """
    cfg = botnet.BotNet50Config(input_size=32, width_multiplier=Fraction(1, 8))
    model = botnet.build_botnet50(cfg, seed=seed).train()
    model.freeze_bn_stats(True)
    rng = np.random.default_rng(seed + 100)
    # C5 maps are 1x1 here, so batch statistics run over N values only; with
    # N=2 the normalisation is nearly discontinuous
    x = _t(rng.normal(size=(8, 3, 32, 32)), True)
    y = np.arange(8) % 2
    kw = dict(h=h, floor=1e-4, kink_tol=1e-3)
    reports = {"input": grad_check_report(lambda z: F.cross_entropy(model(z), y), x, max_checks=20, **kw)}
    probes = {
        "stem conv": model.c1.conv.weight,
        "c2 reduce conv": model.c2[0].conv1.weight,
        "c3 3x3 conv": model.c3[0].conv2.weight,
        "c4 projection": model.c4[0].proj.weight,
        "c5 R_h": model.c5[0].mhsa.rh,
        "c5 W_q": model.c5[0].mhsa.wq[3],
        "c5 BN gamma": model.c5[2].bn3.gamma,
        "head": model.fc.weight,
    }
    fixed = x.detach()
    for name, p in probes.items():
        reports[name] = grad_check_report(lambda _p: F.cross_entropy(model(fixed), y), p, max_checks=10, **kw)
    return reports


def check_end_to_end_gradient():
    reports = end_to_end_reports()
    err = max(r.max_rel_error for r in reports.values())
    checked = sum(r.checked for r in reports.values())
    skipped = sum(r.skipped for r in reports.values())
    ok = err < 1e-3 and skipped <= 0.2 * (checked + skipped)
    return ok, f"max rel err {err:.1e} over {checked} probes ({skipped} on kinks)"


def check_auc_oracle():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(4, 40))
        truth = rng.integers(0, 2, size=n)
        truth[:2] = (0, 1)
        scores = np.round(rng.random(n), 1)  # coarse grid forces ties
        auc, _ = metrics.roc_auc(scores, truth)
        worst = max(worst, abs(auc - oracles.pairwise_auc(scores, truth)))
    return worst <= 1e-12, f"max diff {worst:.1e}"


def check_confusion_example():
    r = metrics.binary_metrics([1, 1, 0, 0], [1, 0, 1, 0])
    vals = (r.accuracy, r.precision, r.recall, r.f1)
    return all(v == 0.5 for v in vals) and (r.tp, r.fp, r.fn, r.tn) == (1, 1, 1, 1), f"acc/prec/rec/f1 {vals}"


def check_vote_exhaustive():
    bad = 0
    for bits in range(2**10):
        labels = [(bits >> i) & 1 for i in range(10)]
        for mean in (0.49, 0.5, 0.51):
            probs = [mean] * 10
            bad += ensemble.majority_vote(labels, probs) != oracles.enumerate_vote(labels, mean)
    return bad == 0, f"{bad} mismatches over 3072 cases"


def check_sam():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        grads = [rng.normal(size=(3, 2)), rng.normal(size=4)]
        params = [np.zeros((3, 2)), np.zeros(4)]
        eps, _ = sam.perturb(params, grads, 0.05)
        worst = max(worst, abs(sam.global_norm(eps) - 0.05))

    def run(rho):
        w = [np.array([1.0, -2.0])]
        state = sam.AdamState.for_params(w)
        cfg = sam.SamConfig(rho=rho, base=sam.AdamConfig(learning_rate=1e-2, weight_decay=0.0))
        for _ in range(10):
            sam.sam_step(lambda perturbed=False: (0.5 * float(w[0] @ w[0]), [w[0].copy()]), w, state, cfg)
        return w[0]

    w_plain = [np.array([1.0, -2.0])]
    state = sam.AdamState.for_params(w_plain)
    for _ in range(10):
        sam.adam_step(state, w_plain, [w_plain[0].copy()], sam.AdamConfig(learning_rate=1e-2, weight_decay=0.0))
    same = np.array_equal(run(0.0), w_plain[0])
    return worst <= 1e-12 and same, f"max |norm-rho| {worst:.1e}, rho=0 matches Adam: {same}"


def _manifest(rng, n_per_class=12, scans=2):
    rows = []
    for i in range(2 * n_per_class):
        label = "AD" if i % 2 else "CN"
        for s in range(int(rng.integers(1, scans + 1))):
            rows.append(volumes.ManifestRow(f"S{i:03d}", f"S{i:03d}-{s}", label, f"S{i:03d}-{s}.vol"))
    return rows


def check_split_disjoint(seeds=range(20)):
    problems = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        rows = _manifest(rng, n_per_class=int(rng.integers(8, 20)))
        plan = splits.make_split(rows, "AD-vs-CN", seed=seed)
        problems += _plan_problems(plan, rows, seed)
    return not problems, problems[0] if problems else f"{len(seeds)} seeds clean"


def _plan_problems(plan, rows, seed):
    out = []
    parts = [set(plan.train), set(plan.val), set(plan.test)]
    if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
        out.append(f"seed {seed}: partitions share subjects")
    pool = parts[0] | parts[1]
    flat = [s for f in plan.folds for s in f]
    if sorted(flat) != sorted(pool) or len(flat) != len(set(flat)):
        out.append(f"seed {seed}: folds do not partition train+val")
    if set(flat) & parts[2]:
        out.append(f"seed {seed}: test subject inside a fold")
    # the emitted streams, not just the plan
    pixels = np.zeros((len(rows), 1, 2, 2), dtype=np.float32)
    ds = dataset.SliceDataset(
        np.array([r.subject_id for r in rows]), np.array([r.scan_id for r in rows]), np.array([r.label for r in rows]), pixels
    )
    rng = np.random.default_rng(seed)
    streams = [
        {s.subject_id for s in dataset.sample_stream(ds, plan.train, 0, plan.task, augment=True, rng=rng, max_shift=1)},
        {s.subject_id for s in dataset.sample_stream(ds, plan.val, 0, plan.task)},
        {s.subject_id for s in dataset.sample_stream(ds, plan.test, 0, plan.task)},
    ]
    if streams[0] & streams[1] or streams[0] & streams[2] or streams[1] & streams[2]:
        out.append(f"seed {seed}: sample streams share subjects")
    for k in range(len(plan.folds)):
        tr, va = plan.fold_subjects(k)
        if set(tr) & set(va) or (set(tr) | set(va)) & parts[2]:
            out.append(f"seed {seed}: fold {k} leaks")
    return out


def check_checkpoint_roundtrip():
    cfg = botnet.BotNet50Config(input_size=32, width_multiplier=Fraction(1, 8))
    model = botnet.build_botnet50(cfg, seed=12).eval()
    x = np.random.default_rng(13).normal(size=(2, 3, 32, 32))
    before = model(x).data.copy()
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.botn"
        checkpoint.save_checkpoint(model, path, {"epoch": 1})
        loaded, _ = checkpoint.load_model(path)
    after = loaded.eval()(x).data
    return np.array_equal(before, after), "logits bit-identical" if np.array_equal(before, after) else "logits differ"


CHECKS = {
    "conv2d vs naive loops": check_conv_oracle,
    "pooling vs naive loops": check_pool_oracles,
    "softmax rows and shift invariance": check_softmax,
    "op gradients vs finite differences": check_op_gradients,
    "MHSA gradients vs finite differences": check_mhsa_gradient,
    "MHSA vs brute force": check_mhsa_oracle,
    "stage shapes 112/56/28/14/7": check_stage_shapes,
    "parameter count closed form": check_param_count,
    "end-to-end gradient (width 1/8)": check_end_to_end_gradient,
    "ROC-AUC vs pairwise oracle": check_auc_oracle,
    "confusion example": check_confusion_example,
    "majority vote exhaustive": check_vote_exhaustive,
    "SAM norm and rho=0 degeneracy": check_sam,
    "subject-disjoint splits and streams": check_split_disjoint,
    "checkpoint round trip": check_checkpoint_roundtrip,
}


def run_checks(names=None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
