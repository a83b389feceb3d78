"""Acceptance criteria. Each test prints one PASS/FAIL line; run with ``pytest tests/test_acceptance.py -s``
to see them inline (they are also echoed past output capture)."""

import itertools
import json
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import torch.nn as nn

from pseudoanomaly import cli
from pseudoanomaly import losses as L
from pseudoanomaly.datasets import BatchSpec, OneClassSplit, compose_batch
from pseudoanomaly.models import (
    BACKBONES,
    BNStrategy,
    DiscriminatorOutput,
    GeneratorSpec,
    bn_state,
    build_discriminator,
    build_generator,
    forward_discriminator,
    forward_generator,
)
from pseudoanomaly.scoring import auroc, tukey_filter
from pseudoanomaly.trainer import CheckpointBundle, Models, RunRecord, TrainConfig, compute_losses, evaluate

torch.set_num_threads(1)


def verdict(capsys, number, title, ok, detail):
    line = f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    with capsys.disabled():
        print("\n" + line, flush=True)
    assert ok, line


# 1. Loss oracle ############################################################################


def bce_oracle(pred, target):
    total = 0.0
    for p in pred:
        p = min(max(p, 1e-7), 1 - 1e-7)
        total += -(target * math.log(p) + (1 - target) * math.log(1 - p))
    return total / len(pred)


def l1_oracle(a, b):
    return sum(abs(x - y) for x, y in zip(a, b)) / len(a)


def mse_oracle(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


def test_c1_loss_oracle(capsys):
    rng = np.random.default_rng(0)
    start, worst = time.perf_counter(), 0.0
    for _ in range(200):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        p = rng.uniform(0, 1, size=shape[0])
        ta, tb, tp = (torch.from_numpy(v) for v in (a, b, p))
        fa, fb, fp = a.ravel().tolist(), b.ravel().tolist(), p.tolist()
        w = L.LossWeights(*rng.uniform(0, 60, 4))
        eps = float(rng.choice([0.0, 1e-8]))
        adv, con, adcon, lat = rng.uniform(0.01, 3), rng.uniform(0, 2), -rng.uniform(0.01, 2), rng.uniform(0.01, 2)
        pairs = [
            (float(L.adversarial_loss(tp, 1)), bce_oracle(fp, 1)),
            (float(L.adversarial_loss(tp, 0)), bce_oracle(fp, 0)),
            (float(L.contextual_loss(ta, tb)), l1_oracle(fa, fb)),
            (float(L.latent_loss(ta, tb)), mse_oracle(fa, fb)),
            (float(L.contextual_adversarial_loss(ta, tb)), -l1_oracle(fa, fb)),
            (L.normality_loss(adv, con, adcon, lat, w),
             w.lambda_adv * adv + w.lambda_con * con + w.lambda_adcon * adcon + w.lambda_lat * lat),
            (L.anomaly_loss(adv, adcon, lat, w, eps),
             w.lambda_adv / (adv + eps) + w.lambda_adcon / (-adcon + eps) + w.lambda_lat / (lat + eps)),
            (L.final_loss(con, lat), con + lat),
            (float(L.discriminator_loss(tp, tp.flip(0), tp)),
             bce_oracle(fp, 1) + bce_oracle(fp[::-1], 0) + bce_oracle(fp, 0)),
        ]
        for got, want in pairs:
            worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - start
    verdict(capsys, 1, "loss oracle", worst < 1e-6 and elapsed < 10, f"max abs err {worst:.2e}, {elapsed:.1f}s")


# 2. Finite-difference gradients ############################################################


class ToyGenerator(nn.Module):
    def __init__(self):
        super().__init__()
        self.spec = SimpleNamespace(in_channels=1, depth=0, auxiliary_bn=False)
        self.net = nn.Sequential(nn.Conv2d(1, 3, 3, padding=1), nn.Tanh(), nn.Conv2d(3, 1, 3, padding=1), nn.Tanh())

    def forward(self, x):
        return self.net(x)


class ToyDiscriminator(nn.Module):
    in_channels = 1

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(1, 4, 3, stride=2)
        self.head = nn.Linear(4, 1)

    def forward(self, x):
        z = torch.tanh(self.conv(x)).mean(dim=(2, 3))
        return DiscriminatorOutput(torch.sigmoid(self.head(z)).squeeze(1), z)


def test_c2_finite_differences(capsys):
    torch.manual_seed(0)
    start = time.perf_counter()
    g, d = ToyGenerator().double(), ToyDiscriminator().double()
    models, config = Models(g, d), TrainConfig()
    x = torch.rand(4, 1, 8, 8, dtype=torch.float64) * 2 - 1
    params = list(g.parameters())
    theta = nn.utils.parameters_to_vector(params).detach().clone()
    rng = torch.Generator().manual_seed(1)
    h, worst = 1e-5, 0.0

    for label, name in ((0, "l_normality"), (1, "l_anomaly")):
        y = torch.full((4,), label)

        def objective(vec):
            nn.utils.vector_to_parameters(vec, params)
            return compute_losses(x, y, models, config).terms[name]

        loss = objective(theta.clone())
        grad = nn.utils.parameters_to_vector(torch.autograd.grad(loss, params))
        for _ in range(10):
            v = torch.randn(theta.shape, generator=rng, dtype=torch.float64)
            v /= v.norm()
            with torch.no_grad():
                fd = (objective(theta + h * v) - objective(theta - h * v)) / (2 * h)
            ad = grad @ v
            worst = max(worst, float(abs(fd - ad) / max(abs(ad), abs(fd), 1e-12)))
    nn.utils.vector_to_parameters(theta, params)
    elapsed = time.perf_counter() - start
    verdict(capsys, 2, "finite-difference gradients", worst < 1e-4 and elapsed < 60,
            f"20 directions over L_n and L_a, max rel err {worst:.2e}, {elapsed:.1f}s")


# 3. AUROC ##################################################################################


def test_c3_auroc_oracle(capsys):
    rng = np.random.default_rng(0)
    start, mismatches, done = time.perf_counter(), 0, 0
    while done < 500:
        n = int(rng.integers(2, 65))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        scores = rng.integers(0, 8, n) if done % 2 else rng.normal(size=n)
        pos, neg = scores[labels == 1], scores[labels == 0]
        wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
        mismatches += auroc(scores, labels) != wins / (len(pos) * len(neg))
        done += 1
    elapsed = time.perf_counter() - start
    verdict(capsys, 3, "AUROC pairwise oracle", mismatches == 0 and elapsed < 10,
            f"{mismatches} mismatches in 500 instances, {elapsed:.1f}s")


# 4. Tukey ##################################################################################


def quantile_oracle(xs, q):
    xs = sorted(xs)
    pos = (len(xs) - 1) * q
    lo, hi = math.floor(pos), math.ceil(pos)
    return xs[lo] + (pos - lo) * (xs[hi] - xs[lo])


def tukey_oracle(xs, k=1.5):
    q1, q3 = quantile_oracle(xs, 0.25), quantile_oracle(xs, 0.75)
    lo, hi = q1 - k * (q3 - q1), q3 + k * (q3 - q1)
    return (lo, hi), [x for x in xs if lo <= x <= hi], [x for x in xs if not lo <= x <= hi]


def test_c4_tukey_oracle(capsys):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    lists = [[1.0, 2.0, 3.0, 4.0, 100.0]]
    lists += [list(rng.standard_cauchy(int(rng.integers(1, 60)))) for _ in range(199)]
    bad = 0
    for xs in lists:
        (lo, hi), kept, removed = tukey_oracle(xs)
        r = tukey_filter(xs)
        same = sorted(r.kept) == sorted(kept) and sorted(r.removed) == sorted(removed)
        bad += not (same and math.isclose(r.fences[0], lo, rel_tol=1e-12, abs_tol=1e-12)
                    and math.isclose(r.fences[1], hi, rel_tol=1e-12, abs_tol=1e-12))
    worked = tukey_filter([1, 2, 3, 4, 100])
    ok = bad == 0 and worked.fences == (-1.0, 7.0) and worked.removed == [100.0]
    elapsed = time.perf_counter() - start
    verdict(capsys, 4, "Tukey oracle", ok and elapsed < 5,
            f"{bad} mismatches in 200 lists, worked example fences {worked.fences}, {elapsed:.2f}s")


# 5. Batch guarantee ########################################################################


def test_c5_batch_guarantee(capsys):
    rng = np.random.default_rng(0)
    start, violations = time.perf_counter(), 0
    pools = [0, 5, 31, 32, 100, 556]
    for i in range(1000):
        pool = pools[i % len(pools)]
        gamma = 0.0 if pool == 0 else float(rng.uniform(0.01, 0.3))
        split = OneClassSplit(0, gamma, 0, tuple(f"n{j}" for j in range(int(rng.integers(300, 5000)))),
                              tuple(f"a{j}" for j in range(pool)), ())
        b = compose_batch(split, BatchSpec(), rng)
        need = 0 if gamma == 0 else min(32, pool)
        violations += (b.n_anomalies < need) or (gamma == 0 and b.n_anomalies != 0) or len(b) != 256
    elapsed = time.perf_counter() - start
    verdict(capsys, 5, "batch anomaly guarantee", violations == 0 and elapsed < 10,
            f"{violations} violations in 1000 batches, {elapsed:.1f}s")


# 6. BN isolation ###########################################################################


def test_c6_bn_isolation(capsys):
    torch.manual_seed(0)
    start = time.perf_counter()
    changed_main, changed_aux = [], True
    for backbone in BACKBONES:
        g = build_generator(GeneratorSpec(backbone=backbone, base_width=8, auxiliary_bn=True)).train()
        before = {k: v for k, v in bn_state(g).items() if ".main." in k}
        aux_before = {k: v for k, v in bn_state(g).items() if ".aux." in k}
        for _ in range(100):
            forward_generator(g, torch.randn(4, 1, 32, 32), "pseudo", BNStrategy(auxiliary_for_pseudo=True))
        after = bn_state(g)
        if any(not torch.equal(v, after[k]) for k, v in before.items()):
            changed_main.append(backbone)
        changed_aux &= any(not torch.equal(v, after[k]) for k, v in aux_before.items())
    d = build_discriminator(1, 16).train()
    d_before = bn_state(d)
    for _ in range(100):
        forward_discriminator(d, torch.randn(4, 1, 32, 32), True, BNStrategy(freeze_for_true_anomaly=True))
    d_after = bn_state(d)
    d_same = all(torch.equal(v, d_after[k]) for k, v in d_before.items())
    elapsed = time.perf_counter() - start
    ok = not changed_main and changed_aux and d_same and elapsed < 30
    verdict(capsys, 6, "BN-strategy isolation", ok,
            f"main stats changed in {changed_main or 'none'}, aux updated={changed_aux}, "
            f"discriminator frozen={d_same}, {elapsed:.1f}s")


# 7. Shapes #################################################################################


def test_c7_architecture_shapes(capsys):
    start, failures = time.perf_counter(), []
    for backbone, size, channels in itertools.product(BACKBONES, (32, 128), (1, 3)):
        g = build_generator(GeneratorSpec(backbone=backbone, in_channels=channels), size).eval()
        x = torch.rand(1, channels, size, size) * 2 - 1
        with torch.no_grad():
            if g(x).shape != x.shape:
                failures.append((backbone, size, channels))
            if backbone == "naive" and g.encode(x).shape[1:] != (100, size // 16, size // 16):
                failures.append(("latent", size, channels))
    elapsed = time.perf_counter() - start
    verdict(capsys, 7, "architecture shapes", not failures and elapsed < 30,
            f"12 backbone/size/channel cases, failures {failures or 'none'}, {elapsed:.1f}s")


# 8 & 9. Toy training #######################################################################

SEEDS = (0, 1, 2)
TOY_TRAIN = {"epochs": 15, "backbone": {"base_width": 16}, "disc_width": 16}


def cli_train(root, gamma, seed, *flags):
    cfg = {"dataset": {"source": "synthetic", "normal_class": 0, "gamma": gamma},
           "train": TOY_TRAIN, "output": {"run_dir": str(root)}}
    path = root / f"config-g{gamma}.json"
    path.write_text(json.dumps(cfg))
    started = time.perf_counter()
    code = cli.main(["train", "--config", str(path), "--seed", str(seed), *flags])
    assert code == 0, f"train exited with {code}"
    config = cli.load_config(path, cli.build_parser().parse_args(["train", "--seed", str(seed), *flags]))
    record = RunRecord.from_json(json.loads((cli.run_dir_for(config) / "run.json").read_text()))
    return record.final_auroc, time.perf_counter() - started


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    out = {}
    for arm, gamma, flags in (("semi", 0.0, ()), ("supervised", 0.05, ()), ("no_adcon", 0.0, ("--no-adcon",))):
        results = [cli_train(root, gamma, s, *flags) for s in SEEDS]
        out[arm] = ([a for a, _ in results], sum(t for _, t in results))
    return out


def test_c8_toy_training(toy_runs, capsys):
    semi, t_semi = toy_runs["semi"]
    sup, t_sup = toy_runs["supervised"]
    m_semi, m_sup = float(np.mean(semi)), float(np.mean(sup))
    improves = m_sup >= m_semi or (m_sup >= m_semi - 0.01 and m_semi > 0.98 and m_sup > 0.98)
    ok = m_semi >= 0.85 and improves and t_semi + t_sup < 15 * 60
    verdict(capsys, 8, "toy training", ok,
            f"gamma=0 mean {m_semi:.4f} {np.round(semi, 4).tolist()}, gamma=0.05 mean {m_sup:.4f} "
            f"{np.round(sup, 4).tolist()}, {t_semi + t_sup:.0f}s")


def test_c9_adcon_ablation(toy_runs, capsys):
    adcon, _ = toy_runs["semi"]
    plain, t_plain = toy_runs["no_adcon"]
    holds = sum(p <= a + 0.02 for a, p in zip(adcon, plain))
    verdict(capsys, 9, "adcon ablation switch", holds >= 2 and t_plain < 15 * 60,
            f"no-adcon <= adcon + 0.02 in {holds}/3 seeds (adcon {np.round(adcon, 4).tolist()}, "
            f"no-adcon {np.round(plain, 4).tolist()}), {t_plain:.0f}s")


# 10. Determinism ###########################################################################


def test_c10_determinism_round_trip(tmp_path, capsys):
    start = time.perf_counter()
    cfg = {"dataset": {"source": "synthetic", "normal_class": 0, "gamma": 0.05},
           "train": {**TOY_TRAIN, "epochs": 2}, "output": {"run_dir": str(tmp_path / "a")}}
    logs, records = [], []
    for name in ("a", "b"):
        cfg["output"]["run_dir"] = str(tmp_path / name)
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(cfg))
        assert cli.main(["train", "--config", str(path)]) == 0
        (run,) = (tmp_path / name).iterdir()
        logs.append((run / "train.log.jsonl").read_bytes())
        records.append(RunRecord.from_json(json.loads((run / "run.json").read_text())))
    bundle = CheckpointBundle.load(run / "checkpoints" / "last")
    config = json.loads((run / "config.json").read_text())
    corpus = cli.load_corpus(config["dataset"])
    split = cli.load_split(config["dataset"], corpus)
    reloaded = evaluate(bundle.models.generator, corpus, split, 32).auroc
    elapsed = time.perf_counter() - start
    ok = logs[0] == logs[1] and reloaded == records[1].final_auroc and elapsed < 300
    verdict(capsys, 10, "determinism and round-trip", ok,
            f"logs identical={logs[0] == logs[1]}, reloaded AUROC {reloaded!r} vs recorded "
            f"{records[1].final_auroc!r}, {elapsed:.0f}s")
