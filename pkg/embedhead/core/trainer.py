# Optimization loop: AdamW, learning-rate schedules, epoch orchestration, top-k retention, two-fold driver

import os
import math
import time
import logging
from collections import OrderedDict, deque
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from embedhead.core.common import TrainingError, EmbedheadError, hrsize, write_csv
from embedhead.core.constants import Constants
from embedhead.core.settings import derive_seed, is_higher_better
from embedhead.core import tensor as T
from embedhead.core import model, losses, sampler, metrics
from embedhead.core.dataset import Slice, assemble_fold, class_frequencies


logger = logging.getLogger('embedhead')

HISTORY_COLUMNS = ['epoch', 'lr', 'train_loss', 'val_loss', 'top1', 'top3', 'macro_f1', 'poison_acc', 'track1', 'track2', 'track3']


class AdamWState:
    def __init__(self, params, weight_decay=0.01, beta1=Constants.BETA1, beta2=Constants.BETA2, eps=Constants.ADAM_EPS):
        self.m = OrderedDict((name, np.zeros_like(p.data)) for name, p in params.items())
        self.v = OrderedDict((name, np.zeros_like(p.data)) for name, p in params.items())
        self.step = 0
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

def adamw_step(params, state, lr, grads=None):
    '''
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * lambda * theta
    grads defaults to the .grad of every parameter
    '''
    if grads is None:
        grads = OrderedDict((name, p.grad) for name, p in params.items())
    for name, g in grads.items():
        if g is None or not np.all(np.isfinite(g)):
            raise TrainingError('Non-finite gradient for parameter %s' % name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        update = (state.m[name] / c1) / (np.sqrt(state.v[name] / c2) + state.eps)
        p.data -= lr * update + lr * state.weight_decay * p.data
    return params

def clip_grad_norm(params, max_norm):
    '''
    Rescales all gradients so their global L2 norm is at most max_norm (0 disables)
    @returns norm before clipping
    '''
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params.values()))
    if max_norm and total > max_norm:
        factor = max_norm / total
        for p in params.values():
            p.grad = p.grad * factor
    return total


def cosine_warm_restart_lr(epoch, eta_max, eta_min=0.0, t0=10, t_mult=2):
    '''
    eta_min + (eta_max - eta_min) (1 + cos(pi T_cur / T_i)) / 2, T_i growing by t_mult at each restart
    '''
    if epoch < 0:
        raise TrainingError('Epoch must be nonnegative, got %s' % epoch)
    t_cur, t_i = float(epoch), float(t0)
    if t_mult == 1:
        t_cur = math.fmod(t_cur, t_i)
    else:
        while t_cur >= t_i:
            t_cur -= t_i
            t_i *= t_mult
    return eta_min + 0.5 * (eta_max - eta_min) * (1 + math.cos(math.pi * t_cur / t_i))

class ReduceOnPlateau:
    '''
    Multiplies the learning rate by factor once the monitored metric has failed to improve
    by more than a relative threshold for more than patience consecutive evaluations
    '''
    def __init__(self, lr, factor=0.1, patience=2, threshold=1e-4, higher_is_better=False, min_lr=0.0):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.higher_is_better = higher_is_better
        self.min_lr = min_lr
        self.best = None
        self.bad_epochs = 0

    def improved(self, value):
        if self.best is None:
            return True
        if self.higher_is_better:
            return value > self.best + self.threshold * abs(self.best)
        return value < self.best - self.threshold * abs(self.best)

    def step(self, value):
        if not math.isfinite(value):
            raise TrainingError('Plateau scheduler received a non-finite metric: %s' % value)
        if self.improved(value):
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr = max(self.min_lr, self.lr * self.factor)
                self.bad_epochs = 0
                logger.info('Plateau: learning rate reduced to %.3g' % self.lr)
        return self.lr

class Schedule:
    '''
    One epoch-granular learning-rate schedule per run
    '''
    def __init__(self, train_settings):
        self.lr = train_settings['lr']
        self.config = train_settings['scheduler']
        self.plateau = None
        if self.config['kind'] == 'reduce_on_plateau':
            self.plateau = ReduceOnPlateau(self.lr, self.config['factor'], self.config['patience'],
                self.config['threshold'], is_higher_better(self.config['monitor']), self.config['eta_min'])

    def lr_for(self, epoch):
        if self.config['kind'] == 'cosine_warm_restarts':
            return cosine_warm_restart_lr(epoch, self.lr, self.config['eta_min'], self.config['t0'], self.config['t_mult'])
        if self.plateau:
            return self.plateau.lr
        return self.lr

    def observe(self, row):
        if self.plateau:
            self.plateau.step(row[self.config['monitor']])


class TopKCheckpoints:
    '''
    Keeps the k best epochs by the ranking metric; earlier epochs win ties
    '''
    def __init__(self, k, metric):
        self.k = k
        self.metric = metric
        self.sign = -1.0 if is_higher_better(metric) else 1.0
        self.kept = []  # (key, epoch, path)

    def key(self, row):
        return (self.sign * row[self.metric], row['epoch'])

    def qualifies(self, row):
        return len(self.kept) < self.k or self.key(row) < self.kept[-1][0]

    def add(self, row, path):
        self.kept.append((self.key(row), row['epoch'], path))
        self.kept.sort()
        evicted = self.kept[self.k:]
        self.kept = self.kept[:self.k]
        for _, epoch, stale in evicted:
            if os.path.exists(stale):
                os.remove(stale)
            logger.debug('Evicted checkpoint of epoch %s' % epoch)

    def paths(self):
        return [path for _, _, path in self.kept]

    def epochs(self):
        return [epoch for _, epoch, _ in self.kept]


class FitResult:
    def __init__(self, fold, checkpoints, epochs, history, params, config):
        self.fold = fold
        self.checkpoints = checkpoints  # best first
        self.epochs = epochs
        self.history = history
        self.params = params
        self.config = config

    @property
    def best(self):
        return self.checkpoints[0]


def _targets(batch):
    return {'labels': batch['labels'], 'poison': batch['poison'], 'taxonomy': batch['taxonomy']}

def _batches(data, indices, batch_size, workers):
    '''
    Gathered batches in order; with several workers, gathers run ahead on a bounded window of threads
    '''
    chunks = [indices[lo:lo + batch_size] for lo in range(0, len(indices), batch_size)]
    if workers <= 1:
        for chunk in chunks:
            yield data.gather(chunk)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        window = deque()
        for chunk in chunks:
            window.append(pool.submit(data.gather, chunk))
            if len(window) >= 2 * workers:
                yield window.popleft().result()
        while window:
            yield window.popleft().result()

def validate_epoch(params, config, data, catalog, loss_config, seesaw_state, costs, batch=1024):
    '''
    @returns metric row (without epoch, lr and train_loss) on a validation Slice
    '''
    everything = data.everything()
    output = model.batched_forward(params, config, everything['embeddings'], everything['features'], batch)
    val_loss = losses.composite_loss(output, _targets(everything), loss_config, seesaw_state).item()
    scores = metrics.score_output(output, everything['labels'], catalog.poison_map, costs)
    return {
        'val_loss': val_loss,
        'top1': scores.accuracy,
        'top3': scores.top3,
        'macro_f1': scores.macro_f1,
        'poison_acc': metrics.poison_accuracy(output, everything['poison'], catalog.poison_map),
        'track1': scores.track1,
        'track2': scores.track2,
        'track3': scores.track3
    }

def fit(train_data, val_data, catalog, config, settings, out_dir, fold=0, extra_meta=None):
    '''
    Trains one head on a fold; train_data and val_data are Slices,
    extra_meta is stored in every checkpoint next to the head config
    @returns FitResult with the retained checkpoints (best first) and the metric history
    '''
    tr = settings['train']
    root = tr['seed']
    os.makedirs(out_dir, exist_ok=True)
    if not len(train_data) or not len(val_data):
        raise TrainingError('Fold %s has an empty training or validation set' % fold)

    params = model.init_head(config, derive_seed(root, 'init:%s' % fold))
    single = tr['precision'] == 'single'
    if single:
        model.round_to_storage(params)
    logger.info('Fold %s: %s head, %s parameters (%s)' % (fold, config.kind, model.count_parameters(params), hrsize(model.parameter_bytes(params))))

    loss_config = losses.loss_config_from_settings(settings, train_data.labels, catalog.n_classes,
        train_data.taxonomy, {rank: len(m['labels']) for rank, m in catalog.taxonomy_maps.items()})
    seesaw_state = None
    if loss_config.kind == 'seesaw':
        seesaw_state = losses.SeesawState(np.bincount(train_data.labels, minlength=catalog.n_classes),
            settings['loss']['p'], settings['loss']['q'])
    costs = metrics.CostMatrixConfig.from_settings(settings)

    weights = None
    if settings['sampler']['enabled']:
        weights = sampler.compute_sampling_weights(class_frequencies(train_data.labels, catalog.n_classes),
            catalog.target_freq, settings['sampler']['floor_eps'], train_data.labels)
    sampler_seed = derive_seed(root, 'sampler:%s' % fold)
    dropout_rng = np.random.default_rng(derive_seed(root, 'dropout:%s' % fold))

    optimizer = AdamWState(params, tr['weight_decay'])
    schedule = Schedule(tr)
    keeper = TopKCheckpoints(tr['top_k'], tr['rank_metric'])
    history = []

    for epoch in range(tr['epochs']):
        started = time.time()
        lr = schedule.lr_for(epoch)
        epoch_seed = derive_seed(sampler_seed, 'epoch:%s' % epoch)
        if weights is not None:
            indices = sampler.draw_epoch_indices(weights, len(train_data), epoch_seed)
        else:
            indices = np.random.default_rng(epoch_seed).permutation(len(train_data))

        total, seen = 0.0, 0
        for n_batch, batch in enumerate(_batches(train_data, indices, tr['batch'], tr['workers'])):
            output = model.forward(params, config, batch['embeddings'], batch['features'], True, dropout_rng)
            try:
                loss = losses.composite_loss(output, _targets(batch), loss_config, seesaw_state)
            except EmbedheadError as e:
                raise TrainingError('Epoch %s batch %s: %s' % (epoch, n_batch, e))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError('Non-finite loss %s at epoch %s batch %s' % (value, epoch, n_batch))
            for p in params.values():
                p.zero_grad()
            T.backward(loss)
            clip_grad_norm(params, tr['grad_clip'])
            try:
                adamw_step(params, optimizer, lr)
            except TrainingError as e:
                raise TrainingError('Epoch %s batch %s: %s' % (epoch, n_batch, e))
            if single:
                model.round_to_storage(params)
            total += value * len(batch['labels'])
            seen += len(batch['labels'])

        row = OrderedDict([('epoch', epoch), ('lr', lr), ('train_loss', total / seen)])
        row.update(validate_epoch(params, config, val_data, catalog, loss_config, seesaw_state, costs))
        if not math.isfinite(row['val_loss']):
            raise TrainingError('Non-finite validation loss at epoch %s' % epoch)
        history.append(row)
        schedule.observe(row)
        logger.info('Fold %s epoch %s: lr %.3g train_loss %.4f val_loss %.4f top1 %.4f track3 %.4f (%.1fs)' % (
            fold, epoch, lr, row['train_loss'], row['val_loss'], row['top1'], row['track3'], time.time() - started))

        if keeper.qualifies(row):
            path = os.path.join(out_dir, 'fold%s_epoch%03d.ckpt' % (fold, epoch))
            meta = dict(extra_meta or {})
            meta.update({
                'config': config.todict(),
                'epoch': epoch,
                'fold': fold,
                'seed': root,
                'rank_metric': tr['rank_metric'],
                'metrics': dict(row),
                'resolved_config': settings
            })
            model.save_checkpoint(params, meta, path)
            keeper.add(row, path)
            logger.info('Saved %s (%s)' % (os.path.basename(path), hrsize(os.path.getsize(path))))

    write_csv(os.path.join(out_dir, 'fold%s_history.csv' % fold), HISTORY_COLUMNS,
        [[row[c] for c in HISTORY_COLUMNS] for row in history])
    return FitResult(fold, keeper.paths(), keeper.epochs(), history, params, config)


def build_slices(train_records, val_records, split, fold, catalog, schema):
    train_set, val_set, test_set = assemble_fold(train_records, val_records, split, fold)
    return (Slice(train_set, catalog, schema, 'train'),
            Slice(val_set, catalog, schema, 'validation'),
            Slice(test_set, catalog, schema, 'test'))

def run_cross_validation(train_records, val_records, split, catalog, schema, settings, out_dir, folds=(0, 1)):
    '''
    Fits one head per fold; the shared test slice is built but never read here
    @returns (list of FitResult, test Slice)
    '''
    results, test_slice = [], None
    for fold in folds:
        train_data, val_data, test_data = build_slices(train_records, val_records, split, fold, catalog, schema)
        if test_slice is None:
            test_slice = test_data
        elif test_data.ids != test_slice.ids:
            raise TrainingError('Folds disagree on the held-out test slice')
        config = model.config_from_settings(settings, train_data.embeddings.shape[1], schema.width, catalog.n_classes,
            {rank: len(m['labels']) for rank, m in catalog.taxonomy_maps.items()})
        results.append(fit(train_data, val_data, catalog, config, settings, out_dir, fold,
            {'catalog': catalog.todict(), 'schema': schema.todict()}))
        logger.info('Fold %s best checkpoint: %s' % (fold, os.path.basename(results[-1].best)))
    return results, test_slice
