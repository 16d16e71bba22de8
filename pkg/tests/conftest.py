import numpy as np
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FD_STEP = 1e-5


def numeric_grad(f, arr, h=FD_STEP, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    idx = list(np.ndindex(arr.shape)) if indices is None else indices
    for i in idx:
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric, floor):
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` keeps entries whose true derivative is zero (where both
    values are rounding noise) from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def unet_gradcheck(depth=1, base=2, out_channels=3, size=8, dropout=0.3, seed=0):
    """Entrywise relative errors of every trainable array of a small U-Net.

    The scalar is the dynamic-label cross-entropy with the labels frozen
    from the unperturbed forward pass, so the check runs through channel
    normalization, the whole network and batch norm in train mode. The
    dropout mask is fixed by reseeding the generator on every call. The
    floor for near-zero derivatives is ``1e-6`` of the largest gradient.
    """
    from selfseg import selflabel, unet

    cfg = unet.UNetConfig(depth=depth, base_features=base, out_channels=out_channels,
                          dropout_p=dropout)
    p = unet.build(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(2, size, size, 1))
    target = selflabel.one_hot(rng.integers(0, out_channels, size=(2, size, size)), out_channels)

    def run(cache=False):
        return unet.forward(p, x, mode="train", rng=np.random.default_rng(99), return_cache=cache)

    def loss():
        y = run()
        return selflabel.cross_entropy(selflabel.normalize_channels(y), target)[0].mean()

    y, cache = run(True)
    y_norm, ncache = selflabel.normalize_channels(y, return_cache=True)
    _, g = selflabel.cross_entropy(y_norm, target)
    grads = unet.backward(p, cache, selflabel.normalize_channels_backward(g / 2, ncache))
    trainable = p.trainable()
    floor = 1e-6 * max(float(np.abs(v).max()) for v in grads.values())
    errs = {}
    for name, arr in trainable.items():
        fd = numeric_grad(loss, arr)
        errs[name] = rel_error(grads[name], fd, floor)
    return errs


def tiny_pool(n=6, size=16, seed=0, fixed=False, n_segments=4):
    """Small phantom-like tile pool for training tests."""
    from selfseg.datapipe import TilePool
    from selfseg.selflabel import fixed_mask_from_binary
    from selfseg.slic import slic_segment

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    imgs, masks = [], []
    for _ in range(n):
        cy, cx = rng.uniform(0, size, 2)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 < (size / 3) ** 2
        pore = (yy - rng.uniform(0, size)) ** 2 + (xx - rng.uniform(0, size)) ** 2 < 4
        img = np.where(blob, 1.0, 0.0) + 0.1 * rng.normal(size=(size, size))
        img[pore] = -2.0
        imgs.append(img)
        masks.append(fixed_mask_from_binary(pore, 2))
    imgs = np.stack(imgs)
    maps = [slic_segment(t, n_segments, 1.0) for t in imgs]
    return TilePool(imgs, maps, np.stack(masks) if fixed else None)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def report(key, ok, detail):
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")

    def order(k):
        num = "".join(ch for ch in k if ch.isdigit())
        return int(num), k

    for key in sorted(ACCEPTANCE_LINES, key=order):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
