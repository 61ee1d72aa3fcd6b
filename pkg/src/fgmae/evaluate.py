"""Transfer-learning protocols and metrics.

Linear probing with a frozen encoder, end-to-end fine-tuning with mixup and
layer-wise lr decay, the classification/segmentation metric set (mAP, F1,
OA, AA, mIoU), and the feature-ablation study runner.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as D
from . import model as M
from . import optim as O
from . import tensor as T
from .rng import Rng
from .tensor import Tensor


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)       # metric name -> scalar
    per_class: dict = field(default_factory=dict)    # metric name -> list

    def __getitem__(self, key):
        return self.values[key]


def metric_map(scores, labels):
    """Macro mean average precision over classes with >= 1 positive.

    Per class: rank by descending score (stable, ties broken by ascending
    index); AP is the mean of precision@rank over the positive ranks.
    Returns (mAP, per-class list with None for excluded classes).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = scores.shape
    per_class = []
    valid = []
    for c in range(k):
        pos = labels[:, c] > 0
        if not pos.any():
            per_class.append(None)
            continue
        order = np.argsort(-scores[:, c], kind="stable")
        ranked = pos[order]
        hits = np.cumsum(ranked)
        precision = hits / np.arange(1, n + 1)
        ap = float(precision[ranked].mean())
        per_class.append(ap)
        valid.append(ap)
    if not valid:
        raise ValueError("no class has a positive example")
    return float(np.mean(valid)), per_class


def metric_f1(pred, labels):
    """Macro F1 over classes for 0/1 predictions; a class with P + R == 0
    contributes 0."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    per_class = []
    for c in range(labels.shape[1]):
        tp = float(np.sum((pred[:, c] == 1) & (labels[:, c] == 1)))
        fp = float(np.sum((pred[:, c] == 1) & (labels[:, c] == 0)))
        fn = float(np.sum((pred[:, c] == 0) & (labels[:, c] == 1)))
        denom = 2 * tp + fp + fn
        per_class.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(per_class)), per_class


def metric_oa_aa(pred, labels):
    """Overall accuracy and unweighted mean of per-class recalls."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.size == 0:
        raise ValueError("empty input")
    oa = float(np.mean(pred == labels))
    recalls = []
    for c in np.unique(labels):
        sel = labels == c
        recalls.append(float(np.mean(pred[sel] == c)))
    return oa, float(np.mean(recalls))


def metric_miou(pred_mask, label_mask, n_classes, ignore_index=None):
    """(OA, AA, mIoU) over segmentation masks. IoU = TP/(TP+FP+FN) per
    class; the mean runs over classes with nonzero union; ignore_index
    pixels are excluded everywhere."""
    pred = np.asarray(pred_mask).ravel()
    label = np.asarray(label_mask).ravel()
    if ignore_index is not None:
        keep = label != ignore_index
        pred, label = pred[keep], label[keep]
    if pred.size == 0:
        raise ValueError("no valid pixels")
    oa = float(np.mean(pred == label))
    recalls = []
    ious = []
    for c in range(n_classes):
        tp = float(np.sum((pred == c) & (label == c)))
        fp = float(np.sum((pred == c) & (label != c)))
        fn = float(np.sum((pred != c) & (label == c)))
        if tp + fn > 0:
            recalls.append(tp / (tp + fn))
        union = tp + fp + fn
        if union > 0:
            ious.append(tp / union)
    aa = float(np.mean(recalls)) if recalls else 0.0
    miou = float(np.mean(ious)) if ious else 0.0
    return oa, aa, miou


# ---------------------------------------------------------------------------
# probing / fine-tuning


@dataclass
class ProbeConfig:
    task: str = "singlelabel"        # or "multilabel"
    epochs: int = 20
    batch_size: int = 8
    optimizer: str = "sgd"           # "adamw" for fine-tuning
    lr: float = 0.1
    weight_decay: float = 0.0
    layer_decay: float = 0.75        # fine-tune only
    mixup_alpha: float = 0.0         # fine-tune only
    seed: int = 0
    eval_every_n: int = 4            # every n-th location held out
    scale_min: float = 0.2

    def __post_init__(self):
        if self.task not in ("singlelabel", "multilabel"):
            raise ValueError(f"unknown task {self.task!r}")


def _split_entries(entries, every_n):
    locs = D.locations(entries)
    eval_locs = set(locs[::every_n])
    train = [e for e in entries if e.location_id not in eval_locs]
    held = [e for e in entries if e.location_id in eval_locs]
    return train, held


def _labels_for(entries, task, n_classes):
    out = np.zeros((len(entries), n_classes), dtype=np.float32)
    for i, e in enumerate(entries):
        for c in e.label_list():
            out[i, c] = 1.0
    if task == "singlelabel":
        return out.argmax(axis=1)
    return out


def _prepare_image(image, model_cfg):
    image = D.zero_pad_channels(image, model_cfg.in_channels)
    return image


def _eval_view(image, model_cfg):
    """Deterministic center view: plain bilinear resize to the model size."""
    return D._bilinear_resize(image, model_cfg.image_size,
                              model_cfg.image_size).astype(np.float32)


def params_digest(params):
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def _batched_features(model, images, detach):
    feats = model.encoder_features(Tensor(np.asarray(images, dtype=np.float32)))
    return feats.detach() if detach else feats


def _classifier_loss(logits, labels, task):
    if task == "multilabel":
        # one-vs-all logistic: mean(softplus(x) - t * x)
        t = Tensor(np.asarray(labels, dtype=logits.data.dtype))
        return T.tmean(T.softplus(logits) - t * logits)
    t = np.asarray(labels)
    if t.ndim == 1:  # hard labels -> one-hot
        onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
        onehot[np.arange(t.size), t.astype(int)] = 1.0
        t = onehot
    return -T.tmean(T.tsum(Tensor(t.astype(logits.data.dtype))
                           * T.log_softmax(logits), axis=-1))


def _evaluate_classifier(model, clf, entries, data_dir, pcfg, n_classes):
    logits_all = []
    labels = _labels_for(entries, pcfg.task, n_classes)
    for i in range(0, len(entries), pcfg.batch_size):
        chunk = entries[i:i + pcfg.batch_size]
        imgs = [_eval_view(_prepare_image(
            D.read_tensor(os.path.join(data_dir, e.path)), model.config), model.config)
            for e in chunk]
        feats = _batched_features(model, np.stack(imgs), detach=True)
        logits = T.matmul(feats, clf["clf.w"]) + clf["clf.b"]
        logits_all.append(logits.data)
    scores = np.concatenate(logits_all)
    report = MetricsReport()
    if pcfg.task == "multilabel":
        mAP, per_ap = metric_map(scores, labels)
        f1, per_f1 = metric_f1((1.0 / (1.0 + np.exp(-scores)) >= 0.5).astype(int),
                               labels.astype(int))
        report.values = {"mAP": mAP, "macro_f1": f1}
        report.per_class = {"AP": per_ap, "F1": per_f1}
    else:
        pred = scores.argmax(axis=1)
        oa, aa = metric_oa_aa(pred, labels)
        report.values = {"OA": oa, "AA": aa}
    return report


def _train_classifier(model, entries, data_dir, pcfg, n_classes, trainable_encoder):
    """Shared loop behind probing and fine-tuning."""
    rng = Rng(pcfg.seed).child("probe")
    gen_init = rng.at(10_000_000)
    clf = {
        "clf.w": Tensor(M.trunc_normal(gen_init, (model.config.enc_width, n_classes))
                        .astype(np.float32), requires_grad=True),
        "clf.b": Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True),
    }
    params = dict(clf)
    opt_state = None
    if trainable_encoder:
        params.update(model.params)
        opt_state = O.OptimState(lr=pcfg.lr, weight_decay=pcfg.weight_decay)
        opt_state.no_decay = {n for n in params
                              if ".ln" in n or ".norm." in n or n == "mask_token"}
        opt_state.lr_scale = layer_decay_scales(model.config, pcfg.layer_decay)

    labels = _labels_for(entries, pcfg.task, n_classes)
    n = len(entries)
    steps_per_epoch = math.ceil(n / pcfg.batch_size)
    schedule = O.LrSchedule(base_lr=pcfg.lr, warmup_steps=0,
                            total_steps=pcfg.epochs * steps_per_epoch)
    aug = D.AugmentationConfig(scale_min=pcfg.scale_min,
                               out_size=model.config.image_size)
    step = 0
    for epoch in range(pcfg.epochs):
        order = rng.child("order").at(epoch).permutation(n)
        for k in range(steps_per_epoch):
            idx = order[k * pcfg.batch_size:(k + 1) * pcfg.batch_size]
            imgs = []
            for j, i in enumerate(idx):
                gen = rng.child("sample").at(step * pcfg.batch_size + j)
                img = _prepare_image(D.read_tensor(
                    os.path.join(data_dir, entries[i].path)), model.config)
                img = D.random_resized_crop(img, aug, gen)
                img = D.horizontal_flip(img, aug.hflip_prob, gen)
                imgs.append(img)
            batch = np.stack(imgs).astype(np.float32)
            y = labels[idx]
            if trainable_encoder and pcfg.mixup_alpha > 0:
                y_soft = y
                if pcfg.task == "singlelabel":
                    y_soft = np.eye(n_classes, dtype=np.float32)[y]
                batch, y, _ = D.mixup(batch, y_soft, pcfg.mixup_alpha,
                                      rng.child("mixup").at(step))
                batch = batch.astype(np.float32)
            for p in params.values():
                p.grad = None
            feats = _batched_features(model, batch, detach=not trainable_encoder)
            logits = T.matmul(feats, clf["clf.w"]) + clf["clf.b"]
            loss = _classifier_loss(logits, y, pcfg.task)
            loss.backward()
            grads = {name: p.grad for name, p in params.items()}
            lr = O.lr_at(step, schedule)
            if trainable_encoder:
                O.adamw_step(params, grads, opt_state, lr=lr)
            else:
                O.sgd_step(clf, {k2: grads[k2] for k2 in clf}, lr,
                           weight_decay=pcfg.weight_decay)
            step += 1
    return clf


def layer_decay_scales(model_cfg, decay):
    """Per-parameter lr scales: classifier head 1, encoder block i (bottom
    = 0) gets decay^(depth - i), patch embedding decay^(depth + 1)."""
    scales = {}
    depth = model_cfg.enc_depth
    for i in range(depth):
        s = decay ** (depth - i)
        for suffix in ("ln1.g", "ln1.b", "qkv.w", "qkv.b", "proj.w", "proj.b",
                       "ln2.g", "ln2.b", "mlp1.w", "mlp1.b", "mlp2.w", "mlp2.b"):
            scales[f"enc.{i}.{suffix}"] = s
    scales["embed.w"] = decay ** (depth + 1)
    scales["embed.b"] = decay ** (depth + 1)
    return scales


def linear_probe_train(model, entries, data_dir, pcfg):
    """Frozen-encoder linear probe; encoder parameters are bitwise unchanged."""
    n_classes = D.SAR_CLASSES if pcfg.task == "singlelabel" else D.MS_CLASSES
    train, held = _split_entries(entries, pcfg.eval_every_n)
    before = params_digest(model.params)
    clf = _train_classifier(model, train, data_dir, pcfg, n_classes,
                            trainable_encoder=False)
    after = params_digest(model.params)
    if before != after:
        raise RuntimeError("probe mutated encoder parameters")
    return _evaluate_classifier(model, clf, held, data_dir, pcfg, n_classes)


def fine_tune(model, entries, data_dir, pcfg):
    """End-to-end fine-tuning with AdamW, layer-wise lr decay and mixup."""
    pcfg = replace(pcfg, optimizer="adamw")
    n_classes = D.SAR_CLASSES if pcfg.task == "singlelabel" else D.MS_CLASSES
    train, held = _split_entries(entries, pcfg.eval_every_n)
    clf = _train_classifier(model, train, data_dir, pcfg, n_classes,
                            trainable_encoder=True)
    return _evaluate_classifier(model, clf, held, data_dir, pcfg, n_classes)


# ---------------------------------------------------------------------------
# feature ablation study


def feature_ablation_study(base_cfg, specs, seeds, manifest_path, work_dir,
                           probe_cfg, include_random_init=False):
    """Pretrain + probe per (feature spec, seed); returns result rows
    (spec, seed, metric, value) plus per-spec mean summary rows."""
    from . import pretrain as P

    if len(specs) < 2 and not include_random_init:
        raise ValueError("an ablation needs at least two feature specs")
    entries = D.read_manifest(manifest_path)
    data_dir = os.path.dirname(os.path.abspath(manifest_path))
    metric_name = "OA" if probe_cfg.task == "singlelabel" else "mAP"
    rows = []
    arms = [(spec, True) for spec in specs]
    if include_random_init:
        arms.append((specs[0], False))
    for spec, pretrained in arms:
        tag = spec.variant if pretrained else "random-init"
        for seed in seeds:
            cfg = replace(base_cfg, feature=spec, seed=seed)
            if pretrained:
                out = os.path.join(work_dir, f"{tag.replace('+', '_')}_s{seed}")
                trainer = P.pretrain_run(cfg, manifest_path, out)
                model = trainer.model
            else:
                model = P.Trainer(cfg, entries, data_dir).model  # untrained
            pc = replace(probe_cfg, seed=seed)
            report = linear_probe_train(model, entries, data_dir, pc)
            rows.append((tag, seed, metric_name, report[metric_name]))
    for tag in list(dict.fromkeys(r[0] for r in rows)):
        vals = [r[3] for r in rows if r[0] == tag]
        rows.append((tag, "mean", metric_name, float(np.mean(vals))))
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w") as f:
        f.write("spec,seed,metric,value\n")
        for spec, seed, metric, value in rows:
            f.write(f"{spec},{seed},{metric},{value!r}\n")
