"""Independent naive reimplementations used as oracles for the metric suite.

Everything here is written as straightforward loops over 4x4 matrices and
raw arrays, sharing no code with the package beyond numpy/scipy primitives.
"""

import math

import numpy as np


def naive_umeyama(src, dst, with_scale=True):
    """Textbook closed-form similarity fit; returns (s, R, t)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = len(src)
    mu_s = sum(src[i] for i in range(n)) / n
    mu_d = sum(dst[i] for i in range(n)) / n
    cov = np.zeros((3, 3))
    var = 0.0
    for i in range(n):
        cov += np.outer(dst[i] - mu_d, src[i] - mu_s)
        var += float((src[i] - mu_s) @ (src[i] - mu_s))
    cov /= n
    var /= n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def naive_ate(est_mats, gt_mats, align="similarity"):
    est = np.array([m[:3, 3] for m in est_mats])
    gt = np.array([m[:3, 3] for m in gt_mats])
    if align == "similarity":
        s, R, t = naive_umeyama(est, gt, with_scale=True)
        est = np.array([s * R @ p + t for p in est])
    elif align == "rigid":
        s, R, t = naive_umeyama(est, gt, with_scale=False)
        est = np.array([R @ p + t for p in est])
    total = 0.0
    for i in range(len(est)):
        d = est[i] - gt[i]
        total += float(d @ d)
    return math.sqrt(total / len(est))


def _angle_of(R):
    return math.acos(min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0)))


def naive_rpe(est_mats, gt_mats, step):
    dts, drs = [], []
    for i in range(len(est_mats) - step):
        rel_gt = np.linalg.inv(gt_mats[i]) @ gt_mats[i + step]
        rel_est = np.linalg.inv(est_mats[i]) @ est_mats[i + step]
        d = rel_est[:3, 3] - rel_gt[:3, 3]
        dts.append(float(d @ d))
        ang = _angle_of(rel_gt[:3, :3].T @ rel_est[:3, :3])
        drs.append(ang * ang)
    return math.sqrt(np.mean(dts)), math.degrees(math.sqrt(np.mean(drs)))


def naive_rel_pose_accuracy(est_mats, gt_mats, max_threshold=30):
    rot_err, trans_err = [], []
    skipped = 0
    n = len(est_mats)
    for i in range(n):
        for j in range(i + 1, n):
            rel_gt = np.linalg.inv(gt_mats[i]) @ gt_mats[j]
            rel_est = np.linalg.inv(est_mats[i]) @ est_mats[j]
            tg = rel_gt[:3, 3]
            if np.linalg.norm(tg) < 1e-9:
                skipped += 1
                continue
            rot_err.append(math.degrees(_angle_of(rel_gt[:3, :3].T @ rel_est[:3, :3])))
            te = rel_est[:3, 3]
            if np.linalg.norm(te) < 1e-9:
                trans_err.append(180.0)
            else:
                c = float(tg @ te / (np.linalg.norm(tg) * np.linalg.norm(te)))
                trans_err.append(math.degrees(math.acos(min(1.0, max(-1.0, c)))))
    if not rot_err:
        return 0.0, 0.0, 0.0, skipped
    rra = 100.0 * np.mean([e < max_threshold for e in rot_err])
    rta = 100.0 * np.mean([e < max_threshold for e in trans_err])
    curve = []
    for th in range(1, max_threshold + 1):
        ar = np.mean([e < th for e in rot_err])
        at = np.mean([e < th for e in trans_err])
        curve.append(min(ar, at))
    area = 0.0
    for k in range(len(curve) - 1):
        area += 0.5 * (curve[k] + curve[k + 1])
    auc = 100.0 * area / (max_threshold - 1)
    return rra, rta, auc, skipped


def naive_tapvid3d(est, est_vis, gt, gt_vis, thresholds, depth_scaled=True):
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    ev = np.asarray(est_vis, dtype=float) > 0.5
    gv = np.asarray(gt_vis, dtype=float) > 0.5
    n, t = ev.shape
    jaccards, fracs = [], []
    for th in thresholds:
        tp = fp = fn = 0
        hit = miss = 0
        for i in range(n):
            for f in range(t):
                d = float(np.linalg.norm(est[i, f] - gt[i, f]))
                lim = th * (abs(gt[i, f, 2]) if depth_scaled else 1.0)
                within = d < lim
                if gv[i, f] and ev[i, f] and within:
                    tp += 1
                if ev[i, f] and not (gv[i, f] and within):
                    fp += 1
                if gv[i, f] and not (ev[i, f] and within):
                    fn += 1
                if gv[i, f]:
                    hit += 1 if within else 0
                    miss += 0 if within else 1
        denom = tp + fp + fn
        jaccards.append(tp / denom if denom else 1.0)
        fracs.append(hit / (hit + miss) if (hit + miss) else 0.0)
    correct = sum(
        1 for i in range(n) for f in range(t) if bool(ev[i, f]) == bool(gv[i, f])
    )
    return (
        100.0 * float(np.mean(jaccards)),
        100.0 * float(np.mean(fracs)),
        100.0 * correct / (n * t),
    )


def naive_normals(cloud, k):
    cloud = np.asarray(cloud, dtype=float)
    n = len(cloud)
    k = min(k, n - 1)
    normals = np.zeros((n, 3))
    for i in range(n):
        d = [float(np.linalg.norm(cloud[j] - cloud[i])) for j in range(n)]
        order = np.argsort(d, kind="stable")[: k + 1]
        pts = cloud[order]
        mu = pts.mean(axis=0)
        cov = np.zeros((3, 3))
        for p in pts:
            cov += np.outer(p - mu, p - mu)
        vals, vecs = np.linalg.eigh(cov)
        normals[i] = vecs[:, 0]
    return normals


def naive_pointmap(pred, gt, align=True, k_normals=16):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if align:
        s, R, t = naive_umeyama(pred, gt, with_scale=True)
        pred = np.array([s * R @ p + t for p in pred])
    acc, match = [], []
    for p in pred:
        ds = [float(np.linalg.norm(p - g)) for g in gt]
        j = int(np.argmin(ds))
        acc.append(ds[j])
        match.append(j)
    comp = []
    for g in gt:
        comp.append(min(float(np.linalg.norm(g - p)) for p in pred))
    np_pred = naive_normals(pred, k_normals)
    np_gt = naive_normals(gt, k_normals)
    cos = [abs(float(np_pred[i] @ np_gt[match[i]])) for i in range(len(pred))]
    return (
        float(np.mean(acc)), float(np.median(acc)),
        float(np.mean(comp)), float(np.median(comp)),
        float(np.mean(cos)), float(np.median(cos)),
    )


def naive_depth(preds, gts, mode="scale", per="sequence"):
    preds = [np.asarray(p, dtype=float) for p in preds]
    gts = [np.asarray(g, dtype=float) for g in gts]

    def fit(p, g):
        if mode == "scale":
            ratios = sorted(
                g.ravel()[k] / p.ravel()[k]
                for k in range(g.size)
                if p.ravel()[k] > 0
            )
            m = len(ratios)
            s = ratios[m // 2] if m % 2 else 0.5 * (ratios[m // 2 - 1] + ratios[m // 2])
            return s, 0.0
        sp = sg = spp = spg = 0.0
        n = 0
        for k in range(p.size):
            sp += p.ravel()[k]
            sg += g.ravel()[k]
            spp += p.ravel()[k] ** 2
            spg += p.ravel()[k] * g.ravel()[k]
            n += 1
        det = n * spp - sp * sp
        s = (n * spg - sp * sg) / det
        b = (sg * spp - sp * spg) / det
        return s, b

    aligned_p, aligned_g = [], []
    if per == "sequence":
        pv = np.concatenate([p.ravel() for p in preds])
        gv = np.concatenate([g.ravel() for g in gts])
        s, b = fit(pv, gv)
        aligned_p.append(s * pv + b)
        aligned_g.append(gv)
    else:
        for p, g in zip(preds, gts):
            s, b = fit(p.ravel(), g.ravel())
            aligned_p.append(s * p.ravel() + b)
            aligned_g.append(g.ravel())
    pa = np.concatenate(aligned_p)
    ga = np.concatenate(aligned_g)
    abs_rel = float(np.mean([abs(pa[k] - ga[k]) / ga[k] for k in range(pa.size)]))
    inliers = 0
    for k in range(pa.size):
        if pa[k] > 0 and max(pa[k] / ga[k], ga[k] / pa[k]) < 1.25:
            inliers += 1
    return abs_rel, inliers / pa.size
