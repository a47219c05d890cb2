"""Self-check suites run by ``ogfr verify``.

Each suite returns a list of :class:`Check` records carrying the measured
error and the tolerance it was held to.  Everything runs in float64.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import fep, layers, losses, retrieval
from . import tensor as T
from .config import Config
from .encoder import encode, grid_shape
from .layers import Params
from .model import Batch, forward_step, init_model, student_forward
from .occlusion import estimate, occlusion_index, pixel_counts
from .rng import Stream
from .synth import ParsingMask, build_splits, occlude


@dataclass
class Check:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<48s} err={self.error:.3e}  tol={self.tol:.0e}"


def toy_config(seed=0, **sections) -> Config:
    return Config(seed=seed, dtype="float64").replace(**sections)


# ---------------------------------------------------------------------------
# gradient checks


def toy_batch(cfg, n_images=2):
    """``n_images`` training renders of distinct identities plus occluded copies."""
    splits = build_splits(max(2, n_images), 2, cfg)
    picks = [splits["train"][2 * i] for i in range(n_images)]
    r = Stream(cfg.seed).split("toy-batch")
    occ = [occlude(s.image, s.mask, r.split(i), (0.2, 0.3)) for i, s in enumerate(picks)]
    return Batch(
        np.stack([s.image.pixels for s in picks]).astype(np.float64),
        np.stack([s.mask.labels for s in picks]),
        np.stack([o[0].pixels for o in occ]).astype(np.float64),
        np.stack([o[1].labels for o in occ]),
        np.arange(n_images),
        np.array([s.image.camera for s in picks]),
    )


def fixed_actions(cfg, batch, seed=0):
    n = grid_shape(cfg.model.height, cfg.model.width, cfg.model.patch, cfg.model.stride)
    a = Stream(seed).split("toy-actions").integers(0, 2, size=(len(batch), n[0] * n[1]))
    a[:, 0] = 0  # make sure at least one replacement token is used
    return a


def total_loss_probes(params, cfg, batch, actions, n_random=32, seed=0):
    """Parameter entries probed by the end-to-end gradient check.

    Always includes the occlusion-embedding rows the batch uses, the agent
    weights, replacement rows of erased patches and the fixed-token
    attention weights; ``n_random`` further entries are drawn at random.
    """
    from .occlusion import estimate_batch

    r = Stream(seed).split("probes")
    d = cfg.model.dim
    probes = []
    z = np.concatenate([estimate_batch(batch.holistic_labels, cfg.model.occlusion_threshold),
                        estimate_batch(batch.occluded_labels, cfg.model.occlusion_threshold)])
    for row in sorted({int(occlusion_index(zz)) for zz in z}):
        probes.append(("enc.occ", row * d + int(r.integers(0, d))))
    for j in range(params["fep.agent.w"].size):
        probes.append(("fep.agent.w", j))
    probes.append(("fep.agent.b", 0))
    for row in np.flatnonzero(actions[0] == 0)[:3]:
        probes.append(("fep.replace", int(row) * d + int(r.integers(0, d))))
    for proj in ("q", "k", "v", "o"):
        name = f"fep.dec0.attn.{proj}.w"
        probes.append((name, int(r.integers(0, params[name].size))))
    names = [n for n, _ in params.items()]
    for _ in range(n_random):
        name = names[int(r.integers(0, len(names)))]
        probes.append((name, int(r.integers(0, params[name].size))))
    return probes


def check_total_loss(seed=0, n_random=32, eps=1e-5, floor=1e-5):
    """End-to-end gradient of the full objective against central differences.

    Returns ``(worst_error, details, n_probes)``.
    """
    cfg = toy_config(seed)
    params = init_model(cfg, 2)
    batch = toy_batch(cfg)
    actions = fixed_actions(cfg, batch, seed)
    probes = total_loss_probes(params, cfg, batch, actions, n_random, seed)
    order = list(dict.fromkeys(n for n, _ in probes))
    tensors = [params[n] for n in order]
    saved = {n: params[n].requires_grad for n in order}
    for t in tensors:
        t.requires_grad = True
    indices = {}
    for name, i in probes:
        indices.setdefault(order.index(name), []).append(i)
    indices = {k: sorted(set(v)) for k, v in indices.items()}
    # the distillation target is detached, so finite differences must hold it fixed too
    target = forward_step(params, cfg, batch, actions=actions).extras["teacher_logp"]
    try:
        worst, details = T.grad_check(
            lambda: forward_step(params, cfg, batch, actions=actions, teacher_logp=target).total,
            tensors, eps=eps, indices=indices, floor=floor, return_details=True)
    finally:
        for n, flag in saved.items():
            params[n].requires_grad = flag
    return worst, details, len(details)


def _rand(r, *shape):
    return T.parameter(r.normal(size=shape))


def _weights(r, *shape):
    return T.Tensor(r.normal(size=shape))


def _small_params(r, d=8, heads=2):
    p = Params()
    with T.precision(np.float64):
        layers.init_decoder_layer(p, "l", d, 2, r.split("l"), 0.3)
    return p, heads


def gradcheck_suite(seed=0) -> list:
    checks = []
    r = Stream(seed).split("gradcheck")
    tol = 1e-4

    def add(name, fn, params):
        # floor 1e-4: entries whose true gradient is zero (e.g. key biases) are held to 1e-8 absolute
        checks.append(Check(name, T.grad_check(fn, params, floor=1e-4), tol))

    with T.precision(np.float64):
        a, b = _rand(r.split(0), 3, 4), _rand(r.split(1), 4)
        w = _weights(r.split(2), 3, 4)
        add("add/mul/div broadcast", lambda: ((a + b) * a / (b * b + 2.0) * w).sum(), [a, b])
        m1, m2 = _rand(r.split(3), 2, 3, 4), _rand(r.split(4), 4, 5)
        w2 = _weights(r.split(5), 2, 3, 5)
        add("matmul", lambda: (T.matmul(m1, m2) * w2).sum(), [m1, m2])
        x = _rand(r.split(6), 2, 5, 6)
        wx = _weights(r.split(7), 2, 5, 6)
        add("softmax", lambda: (T.softmax(x, axis=-1) * wx).sum(), [x])
        add("log_softmax", lambda: (T.log_softmax(x, axis=-1) * wx).sum(), [x])
        add("gelu/exp/sigmoid", lambda: ((T.gelu(x) + T.exp(x * 0.3) + T.sigmoid(x)) * wx).sum(), [x])
        pos = T.parameter(np.abs(r.split(8).normal(size=(4, 3))) + 0.5)
        add("log/sqrt/power", lambda: (T.log(pos) + T.sqrt(pos) + pos ** 3).sum(), [pos])
        g, bb = _rand(r.split(9), 6), _rand(r.split(10), 6)
        add("layer_norm", lambda: (T.layer_norm(x, g, bb) * wx).sum(), [x, g, bb])
        add("getitem/concat/transpose",
            lambda: (T.concat([x[:, 1:3], x[:, :2] * 2.0], axis=1).transpose(0, 2, 1) ** 2).sum(), [x])

        p, heads = _small_params(r.split("attn"))
        xs = _rand(r.split(11), 2, 7, 8)
        wy = _weights(r.split(12), 2, 7, 8)
        trainable = [t for _, t in p.items()]
        add("attention", lambda: (layers.attention(xs, p, "l.attn", heads) * wy).sum(), [xs] + trainable)
        add("attention_fixed", lambda: (layers.attention_fixed(xs, p, "l.attn", heads, 3) * wy).sum(),
            [xs] + trainable)
        add("decoder_layer", lambda: (layers.decoder_layer(xs, p, "l", heads, n_fixed=3) * wy).sum(),
            [xs] + trainable)

        # agent log-probability with respect to G and its bias
        states = T.Tensor(r.split(13).dirichlet(np.ones(9), size=6))
        acts = r.split(14).integers(0, 2, size=6)
        gw, gb = _rand(r.split(15), 9), T.parameter(np.array(0.1))

        def logp():
            m = fep.agent_forward_t(states, gw, gb)
            return (T.log(m) * acts.astype(float) + T.log(1.0 - m) * (1.0 - acts)).sum()
        add("agent log-prob wrt G", logp, [gw, gb])

    # model pieces at toy size
    cfg = toy_config(seed)
    m = cfg.model
    params = init_model(cfg, 2)
    batch = toy_batch(cfg)
    actions = fixed_actions(cfg, batch, seed)
    from .occlusion import estimate_batch

    z = estimate_batch(batch.holistic_labels, m.occlusion_threshold)
    head = _weights(r.split(20), len(batch), 1 + m.n_parts + actions.shape[1], m.dim)

    def purified():
        bundle = encode(batch.holistic, z, batch.cameras, params, m)
        return (fep.purify(bundle, actions, params, m).tokens * head).sum()

    def student():
        bundle = encode(batch.occluded, z, batch.cameras, params, m)
        return (student_forward(bundle, params, m).tokens * head).sum()

    def probe(names, k=6):
        rr = r.split("probe", *names)
        tensors = [params[n] for n in names]
        return tensors, {i: sorted(set(int(j) for j in rr.integers(0, t.size, size=k)))
                         for i, t in enumerate(tensors)}

    for label, fn, names in (
        ("purify + linear head", purified, ["fep.replace", "fep.dec0.attn.q.w", "fep.dec0.attn.v.w",
                                            "fep.dec1.mlp.fc1.w", "enc.block0.attn.k.w"]),
        ("student_forward + linear head", student, ["stu.layer0.attn.q.w", "stu.layer1.mlp.fc2.w",
                                                    "stu.layer1.ln1.g", "enc.patch.w"]),
    ):
        tensors, idx = probe(names)
        checks.append(Check(label, T.grad_check(fn, tensors, indices=idx), tol))

    with T.precision(np.float64):
        rr = r.split("losses")
        fh, fo = _rand(rr.split(0), 3, 5, 4), _rand(rr.split(1), 3, 5, 4)
        hd = _rand(rr.split(2), 5, 4, 3)
        lab = np.array([0, 1, 2])
        add("loss_mse", lambda: losses.loss_mse(fh, fo), [fh, fo])
        add("loss_cos", lambda: losses.loss_cos(fh, fo), [fh, fo])
        target = losses.teacher_log_probs(fh, hd)
        add("loss_kd", lambda: losses.loss_kd(fh, fo, lab, hd, 0.3, 0.4, target), [fo, hd])
        add("loss_en", lambda: losses.loss_en(fo[:, 0, :], fh[:, 0, :], lab, hd), [fh, fo, hd])
        corr_logits = _rand(rr.split(3), 2, 8, 9)
        masks = rr.split(4).integers(0, 9, size=(2, 16, 8))
        add("loss_mask", lambda: losses.loss_mask(T.softmax(corr_logits, axis=-1), masks, (4, 2), 16, 8),
            [corr_logits])
        feats = _rand(rr.split(5), 6, 4)
        tl = np.array([0, 0, 1, 1, 2, 2])
        add("loss_triplet (batch hard)", lambda: losses.triplet_batch_hard(feats, tl, 5.0), [feats])

    worst, _, n = check_total_loss(seed)
    checks.append(Check(f"total loss, {n} sampled entries", worst, 1e-3))
    return checks


# ---------------------------------------------------------------------------
# policy gradient


def peaked_states(n, k1, rng, sharpness=4.0):
    """Correlation-like rows, each concentrated on one part."""
    logits = rng.normal(size=(n, k1))
    logits[np.arange(n), rng.integers(0, k1, size=n)] += sharpness
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def expected_return(states, w, b, reward_fn):
    """J(w, b) = sum over every action vector of pi(a) * R(a)."""
    m = fep.agent_forward(states, w, b)
    total = 0.0
    for bits in itertools.product((0, 1), repeat=states.shape[0]):
        a = np.array(bits)
        total += np.prod(np.where(a == 1, m, 1.0 - m)) * reward_fn(a)
    return total


def exact_gradient(states, w, b, reward_fn, eps=1e-6):
    """Gradient of the enumerated J by central differences (w entries, then b)."""
    theta = np.concatenate([w, [b]]).astype(np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += eps
        down[i] -= eps
        grad[i] = (expected_return(states, up[:-1], up[-1], reward_fn)
                   - expected_return(states, down[:-1], down[-1], reward_fn)) / (2 * eps)
    return grad


def monte_carlo_gradient(states, w, b, reward_fn, episodes, rng):
    m = fep.agent_forward(states, w, b)
    actions = (rng.random((episodes, m.size)) < m).astype(np.int64)
    returns = reward_fn(actions)
    st = np.broadcast_to(states, (episodes,) + states.shape)
    gw, gb = fep.policy_gradient(st, actions, returns, w, b)
    return np.concatenate([gw, [gb]])


def reinforce_case(n, seed=0, episodes=100_000, k1=9):
    """(exact, estimate) gradients for ``n`` patches with a rigged linear reward."""
    r = Stream(seed).split("reinforce", n)
    states = peaked_states(n, k1, r.split("states"))
    w = r.split("w").normal(0.0, 0.5, size=k1)
    b = 0.2
    # R(a) = c.a minus its expectation: deterministic in a, centred to keep the variance low
    c = r.split("c").uniform(0.5, 1.5, size=n)
    offset = float(c @ fep.agent_forward(states, w, b))

    def reward_fn(a):
        return np.asarray(a) @ c - offset

    exact = exact_gradient(states, w, b, reward_fn)
    est = monte_carlo_gradient(states, w, b, reward_fn, episodes, r.split("mc"))
    return exact, est


def relative_errors(exact, est, min_magnitude=1e-3):
    big = np.abs(exact) > min_magnitude
    return np.abs(est[big] - exact[big]) / np.abs(exact[big])


def poison_patch_run(seed, n_patches=8, updates=200, batch=16, lr=1.0, poison=2, gold=5):
    """Train the agent where erasing ``poison`` helps and erasing ``gold`` hurts.

    Every image shares the patch layout (states jittered per image).  The
    true-class probability rises by 0.3 when the poison patch is erased and
    falls by 0.3 when the gold patch is erased.  Returns the final
    retain probabilities of the layout.
    """
    r = Stream(seed).split("poison")
    k1 = 9
    base = peaked_states(n_patches, k1, r.split("layout"), sharpness=6.0)
    base[poison] = np.eye(k1)[0] * 0.9 + 0.1 / k1
    base[gold] = np.eye(k1)[4] * 0.9 + 0.1 / k1
    w, b = np.zeros(k1), 0.0
    p_b = 0.5
    for step in range(updates):
        rs = r.split("step", step)
        states = np.clip(base[None] + rs.normal(0.0, 0.01, size=(batch,) + base.shape), 1e-6, None)
        states /= states.sum(axis=-1, keepdims=True)
        probs = fep.agent_forward(states, w, b)
        actions = fep.sample_actions(probs, rs)
        p_m = 0.5 + 0.3 * (1 - actions[:, poison]) - 0.3 * (1 - actions[:, gold])
        rewards = fep.reward(np.clip(p_m, 0.0, 1.0), p_b)
        w, b = fep.reinforce_update(states, actions, rewards, w, b, lr)
    return fep.agent_forward(base, w, b)


def reinforce_suite(seed=0) -> list:
    checks = []
    for n in range(3, 9):
        exact, est = reinforce_case(n, seed)
        err = relative_errors(exact, est)
        checks.append(Check(f"REINFORCE vs enumeration, N={n}", float(err.max(initial=0.0)), 0.05))
    for s in range(3):
        m = poison_patch_run(s)
        # passes iff m[poison] < 0.5 and m[gold] > 0.5
        checks.append(Check(f"poison patch m<0.5, gold m>0.5 (seed {s})", max(m[2], 1.0 - m[5]),
                            np.nextafter(0.5, 0.0)))
    return checks


# ---------------------------------------------------------------------------
# structural invariants


def fixed_jacobian_max(seed, d=8, heads=2, n_fixed=3, n_patch=5):
    """Largest |d(fixed per-head outputs) / d(patch inputs)| over the full Jacobian."""
    r = Stream(seed).split("jacobian")
    p, _ = _small_params(r.split("p"), d, heads)
    with T.precision(np.float64):
        x = T.parameter(r.split("x").normal(size=(1, n_fixed + n_patch, d)))
        _, info = layers.attention_fixed(x, p, "l.attn", heads, n_fixed, return_heads=True)
        fixed = info["fixed"]
        worst = 0.0
        for idx in np.ndindex(*fixed.shape):
            x.grad = None
            cot = np.zeros(fixed.shape)
            cot[idx] = 1.0
            T.Tape.from_output(fixed).backward(cot)
            g = np.zeros_like(x.data) if x.grad is None else x.grad
            worst = max(worst, float(np.abs(g[:, n_fixed:, :]).max()))
    return worst


def occlusion_cases():
    """Ten hand-built masks with their hand-counted y and z (lambda = 5)."""
    def mask(counts):
        labels = np.zeros((16, 8), dtype=np.uint8)
        flat = labels.reshape(-1)
        pos = 0
        for part, c in counts.items():
            flat[pos:pos + c] = part
            pos += c
        return ParsingMask(labels)

    full = {1: 20, 2: 10, 3: 10, 4: 30, 5: 10, 6: 10, 7: 6, 8: 6}
    cases = [
        (full, [20, 20, 30, 32], [0, 0, 0, 0]),
        ({}, [0, 0, 0, 0], [1, 1, 1, 1]),
        ({**full, 1: 5}, [5, 20, 30, 32], [0, 0, 0, 0]),       # y == lambda is visible
        ({**full, 1: 4}, [4, 20, 30, 32], [1, 0, 0, 0]),
        ({**full, 2: 0, 3: 0}, [20, 0, 30, 32], [0, 1, 0, 0]),
        ({**full, 2: 2, 3: 3}, [20, 5, 30, 32], [0, 0, 0, 0]),   # two fine parts summed
        ({**full, 2: 2, 3: 2}, [20, 4, 30, 32], [0, 1, 0, 0]),
        ({1: 20, 2: 10, 3: 10, 4: 30}, [20, 20, 30, 0], [0, 0, 0, 1]),
        ({4: 3, 5: 1, 6: 1, 7: 1, 8: 1}, [0, 0, 3, 4], [1, 1, 1, 1]),
        ({1: 6, 4: 6, 8: 5}, [6, 0, 6, 5], [0, 1, 0, 0]),
    ]
    return [(mask(c), np.array(y), np.array(z)) for c, y, z in cases]


def invariants_suite(seed=0) -> list:
    checks = []
    r = Stream(seed).split("invariants")

    # fixed tokens ignore patch tokens
    worst = max(fixed_jacobian_max(seed + s) for s in range(20))
    checks.append(Check("fixed-token Jacobian wrt patches (20 seeds)", worst, 1e-12))

    # occlusion estimator
    bad = 0
    for msk, y, z in occlusion_cases():
        yy, zz = pixel_counts(msk), estimate(msk, 5)
        bad += int(not (np.array_equal(yy, y) and np.array_equal(zz, z)))
    checks.append(Check("occlusion estimator, 10 hand-counted masks", float(bad), 0.0))

    # distance collapse cases
    k, d = 8, 16
    q = retrieval.GalleryEntry(0, 0, r.normal(size=d), r.normal(size=(k, d)), np.zeros(k, bool))
    g = retrieval.GalleryEntry(1, 1, r.normal(size=d), r.normal(size=(k, d)), np.zeros(k, bool))
    checks.append(Check("distance, all parts invisible",
                        abs(retrieval.distance(q, g) - float(np.linalg.norm(q.f_g - g.f_g))), 0.0))
    checks.append(Check("distance, identical entries", abs(retrieval.distance(q, q)), 0.0))
    diff = r.normal(size=d)
    qa = retrieval.GalleryEntry(0, 0, np.zeros(d), np.zeros((k, d)), np.ones(k, bool))
    ga = retrieval.GalleryEntry(1, 1, diff, np.tile(diff, (k, 1)), np.ones(k, bool))
    checks.append(Check("distance, equal part distances",
                        abs(retrieval.distance(qa, ga) - float(np.linalg.norm(diff))), 1e-12))

    # loss zero cases
    with T.precision(np.float64):
        f = T.Tensor(r.normal(size=(3, 9, 16)))
        heads = T.Tensor(r.normal(size=(9, 16, 5)))
        checks.append(Check("mse(F, F)", abs(float(losses.loss_mse(f, f).data)), 1e-10))
        checks.append(Check("cos(F, F)", abs(float(losses.loss_cos(f, f).data)), 1e-10))
        checks.append(Check("KL(F, F)", abs(float(losses.kl_term(f, f, heads).data)), 1e-10))

    # correlation rows and MHSA_fix attention rows sum to one
    with T.precision(np.float64):
        corr = fep.correlation(T.Tensor(r.normal(size=(2, 12, 16))), T.Tensor(r.normal(size=(2, 9, 16))))
        checks.append(Check("correlation rows sum to 1", float(np.abs(corr.data.sum(-1) - 1).max()), 1e-6))
        p, heads_n = _small_params(r.split("attn"))
        _, info = layers.attention_fixed(T.Tensor(r.normal(size=(2, 7, 8))), p, "l.attn", heads_n, 3,
                                         return_heads=True)
        checks.append(Check("fixed-attention rows sum to 1",
                            float(np.abs(info["weights"].data.sum(-1) - 1).max()), 1e-12))

    # retain/replace selection is idempotent
    with T.precision(np.float64):
        fp = T.Tensor(r.normal(size=(2, 6, 4)))
        rep = T.Tensor(r.normal(size=(6, 4)))
        a = r.integers(0, 2, size=(2, 6))
        once = fep.select_patches(fp, a, rep)
        twice = fep.select_patches(once, a, rep)
        checks.append(Check("patch selection idempotent", float(np.abs(once.data - twice.data).max()), 0.0))

    # rank metrics ignore monotone transforms of the distance
    ids = np.repeat(np.arange(5), 2)
    qs = retrieval.FeatureSet(ids, np.zeros(10, int), r.normal(size=(10, 8)), r.normal(size=(10, 8, 8)),
                              r.random((10, 8)) < 0.5)
    gs = retrieval.FeatureSet(ids, np.ones(10, int), r.normal(size=(10, 8)), r.normal(size=(10, 8, 8)),
                              r.random((10, 8)) < 0.5)
    dist = retrieval.distance_matrix(qs, gs)
    base = retrieval.evaluate_features(qs, gs, dist=dist)
    moved = retrieval.evaluate_features(qs, gs, dist=np.exp(3.0 * dist) + 1.0)
    checks.append(Check("CMC/mAP invariant to monotone transform",
                        max(abs(base[k] - moved[k]) for k in ("rank1", "rank5", "mAP")), 0.0))

    # teacher logits carry no gradient through the KL term
    with T.precision(np.float64):
        fh = T.parameter(r.normal(size=(2, 9, 16)))
        fo = T.parameter(r.normal(size=(2, 9, 16)))
        kl = losses.kl_term(fh, fo, T.Tensor(r.normal(size=(9, 16, 4))))
        kl.backward()
        g = 0.0 if fh.grad is None else float(np.abs(fh.grad).max())
        checks.append(Check("KL term has no gradient into the teacher", g, 0.0))
    return checks


SUITES = {"gradcheck": gradcheck_suite, "reinforce": reinforce_suite, "invariants": invariants_suite}


def run(suite, seed=0) -> list:
    return SUITES[suite](seed)
