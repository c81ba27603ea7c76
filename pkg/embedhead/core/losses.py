# Classification objectives: (weighted) cross-entropy, focal, seesaw, poison BCE and their composite

import logging

import numpy as np

from embedhead.core.common import LossError
from embedhead.core import tensor as T


logger = logging.getLogger('embedhead')

PRIMARY_LOSSES = ['ce', 'weighted_ce', 'focal', 'seesaw']
DEFAULT_AUX_WEIGHT = 0.1


def class_weights(train_freq):
    '''
    Inverse class frequency normalized to mean 1 over the classes present; absent classes get 0
    '''
    freq = np.asarray(train_freq, dtype=np.float64)
    present = freq > 0
    if not present.any():
        raise LossError('Class weights need at least one class with training support')
    weights = np.zeros_like(freq)
    weights[present] = 1.0 / freq[present]
    return weights * present.sum() / weights.sum()


def _check_targets(logits, targets):
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise LossError('Logits %s and targets %s do not conform' % (list(logits.shape), list(targets.shape)))
    if len(targets) and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        bad = targets[(targets < 0) | (targets >= logits.shape[1])][0]
        raise LossError('Target index %s outside [0, %s)' % (bad, logits.shape[1]))
    return targets

def _batch_mean(per_sample, targets, weights):
    '''
    Plain mean, or sum(w_t * l) / sum(w_t) when per-class weights are given
    '''
    if weights is None:
        return T.reduce_mean(per_sample)
    w = np.asarray(weights, dtype=np.float64)[targets]
    total = w.sum()
    if total <= 0:
        return T.scale(T.reduce_sum(per_sample), 0.0)
    return T.scale(T.reduce_sum(T.mul(per_sample, w)), 1.0 / total)

def cross_entropy(class_logits, targets, weights=None):
    logits = T.as_tensor(class_logits)
    targets = _check_targets(logits, targets)
    nll = T.scale(T.pick(T.log_softmax(logits), targets), -1.0)
    return _batch_mean(nll, targets, weights)

def masked_cross_entropy(logits, targets, weights=None):
    '''
    Cross-entropy over the rows whose target is not -1 (labels unknown for that rank)
    '''
    logits = T.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    keep = targets >= 0
    w = np.ones(logits.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    w = np.append(w, 0.0)
    safe = np.where(keep, targets, 0)
    nll = T.scale(T.pick(T.log_softmax(logits), _check_targets(logits, safe)), -1.0)
    return _batch_mean(nll, np.where(keep, targets, len(w) - 1), w)

def focal_loss(class_logits, targets, gamma, weights=None):
    if gamma < 0:
        raise LossError('Focal gamma must be nonnegative, got %s' % gamma)
    logits = T.as_tensor(class_logits)
    targets = _check_targets(logits, targets)
    log_pt = T.pick(T.log_softmax(logits), targets)
    modulator = T.power(T.sub(1.0, T.exp(log_pt)), gamma)
    return _batch_mean(T.scale(T.mul(modulator, log_pt), -1.0), targets, weights)


class SeesawState:
    '''
    Per-class positive counts from the training split with the mitigation (p) and compensation (q) exponents
    '''
    def __init__(self, class_counts, p=0.8, q=2.0):
        if p < 0 or q < 0:
            raise LossError('Seesaw exponents must be nonnegative, got p=%s q=%s' % (p, q))
        self.counts = np.maximum(np.asarray(class_counts, dtype=np.float64), 1.0)
        self.p = float(p)
        self.q = float(q)
        log_n = np.log(self.counts)
        # log M[t, j] = p * log(N_j / N_t) where N_j < N_t, else 0
        self.log_mitigation = self.p * np.minimum(0.0, log_n[None, :] - log_n[:, None])

    @property
    def n_classes(self):
        return len(self.counts)

def seesaw_factors(logits, targets, state):
    '''
    log S for every (sample, class); S = M * C with C_tj = (sigma_j / sigma_t)^q where sigma_j > sigma_t,
    and S at the target is 1
    '''
    z = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    log_s = state.log_mitigation[targets].copy()
    if state.q:
        log_s += state.q * np.maximum(0.0, z - z[rows, targets][:, None])
    log_s[rows, targets] = 0.0
    return log_s

def seesaw_loss(class_logits, targets, state, weights=None, log_factors=None):
    '''
    -log(e^z_t / (e^z_t + sum_{j != t} S_tj e^z_j)); S is held constant in the backward pass.
    log_factors freezes S at given values instead of recomputing it from the logits
    '''
    logits = T.as_tensor(class_logits)
    targets = _check_targets(logits, targets)
    if state.n_classes != logits.shape[1]:
        raise LossError('Seesaw counts cover %s classes, logits have %s' % (state.n_classes, logits.shape[1]))
    if log_factors is None:
        log_factors = seesaw_factors(logits.data, targets, state)
    adjusted = T.add(logits, log_factors)
    nll = T.scale(T.pick(T.log_softmax(adjusted), targets), -1.0)
    return _batch_mean(nll, targets, weights)

def poison_bce(poison_logit, labels):
    '''
    y * softplus(-z) + (1 - y) * softplus(z), batch-averaged
    '''
    z = T.as_tensor(poison_logit)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != z.shape:
        raise LossError('Poison logits %s and labels %s do not conform' % (list(z.shape), list(y.shape)))
    per_sample = T.add(T.mul(T.softplus(T.scale(z, -1.0)), y), T.mul(T.softplus(z), 1.0 - y))
    return T.reduce_mean(per_sample)


class LossConfig:
    def __init__(self, kind='seesaw', alpha=0.1, gamma=2.0, class_weights=None, aux_weights=None, taxonomy_weights=None):
        if kind not in PRIMARY_LOSSES:
            raise LossError('Unknown loss %s, expected one of %s' % (kind, PRIMARY_LOSSES))
        if alpha < 0:
            raise LossError('Poison loss weight must be nonnegative, got %s' % alpha)
        if kind == 'weighted_ce' and class_weights is None:
            raise LossError('weighted_ce needs class weights')
        if class_weights is not None:
            class_weights = np.asarray(class_weights, dtype=np.float64)
            if not np.all(np.isfinite(class_weights)) or (class_weights < 0).any():
                raise LossError('Class weights must be finite and nonnegative')
        self.kind = kind
        self.alpha = float(alpha)
        self.gamma = float(gamma)
        self.class_weights = class_weights
        self.aux_weights = dict(aux_weights or {})
        self.taxonomy_weights = dict(taxonomy_weights or {})

    def aux_weight(self, rank):
        return self.aux_weights.get(rank, DEFAULT_AUX_WEIGHT)

def taxonomy_label_weights(labels, n_labels):
    labels = np.asarray(labels, dtype=np.int64)
    labels = labels[labels >= 0]
    counts = np.bincount(labels, minlength=n_labels).astype(np.float64)
    if not counts.sum():
        return np.ones(n_labels)
    return class_weights(counts / counts.sum())

def loss_config_from_settings(settings, train_labels, n_classes, taxonomy_targets=None, taxonomy_sizes=None):
    '''
    train_labels: catalog indices of the training rows the head will see
    '''
    s = settings['loss']
    kind = s['kind']
    freq = np.bincount(np.asarray(train_labels, dtype=np.int64), minlength=n_classes) / float(max(1, len(train_labels)))
    weights = None
    if kind == 'weighted_ce' or s['class_weighting']:
        weights = class_weights(freq)
        if kind == 'ce':
            kind = 'weighted_ce'
    tax_weights = {}
    if s['weighted_taxonomy'] and taxonomy_targets:
        for rank, targets in taxonomy_targets.items():
            tax_weights[rank] = taxonomy_label_weights(targets, taxonomy_sizes[rank])
    alpha = s['alpha'] if settings['model']['aux_heads']['poison'] else 0.0
    return LossConfig(kind, alpha, s['gamma'], weights, s['aux_weights'], tax_weights)

def primary_loss(class_logits, targets, config, seesaw_state=None, log_factors=None):
    if config.kind in ('ce', 'weighted_ce'):
        return cross_entropy(class_logits, targets, config.class_weights)
    if config.kind == 'focal':
        return focal_loss(class_logits, targets, config.gamma, config.class_weights)
    if seesaw_state is None:
        raise LossError('Seesaw loss needs a SeesawState')
    return seesaw_loss(class_logits, targets, seesaw_state, config.class_weights, log_factors)

def composite_loss(output, targets, config, seesaw_state=None, log_factors=None):
    '''
    primary class loss + alpha * poison BCE + sum over taxonomy heads of beta_r * CE
    targets: dict with "labels", "poison" and per-rank "taxonomy" arrays
    '''
    loss = primary_loss(output.class_logits, targets['labels'], config, seesaw_state, log_factors)
    if config.alpha > 0:
        if output.poison_logit is None:
            raise LossError('Poison loss weight %s given but the head has no poison output' % config.alpha)
        loss = T.add(loss, T.scale(poison_bce(output.poison_logit, targets['poison']), config.alpha))
    for rank, logits in output.taxonomy_logits.items():
        beta = config.aux_weight(rank)
        if beta:
            aux = masked_cross_entropy(logits, targets['taxonomy'][rank], config.taxonomy_weights.get(rank))
            loss = T.add(loss, T.scale(aux, beta))
    return loss
