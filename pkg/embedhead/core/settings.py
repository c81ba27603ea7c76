# Run configuration: defaults, user file merging, overrides and validation

import os
import copy
import logging

import ujson as json

from embedhead.core.common import SettingsError, stable_hash, read_json, write_json
from embedhead.core.constants import Constants, Metadata_Columns


logger = logging.getLogger('embedhead')

THREADS_ENV = 'EMBEDHEAD_THREADS'

SCHEDULERS = ['cosine_warm_restarts', 'reduce_on_plateau', 'constant']
LOSSES = ['ce', 'weighted_ce', 'focal', 'seesaw']
MODELS = ['mlp', 'fusion']
PRECISIONS = ['single', 'double']
RANK_METRICS = ['track1', 'track2', 'track3', 'val_loss', 'top1', 'top3', 'macro_f1', 'poison_acc']
HIGHER_IS_BETTER = {'top1', 'top3', 'macro_f1', 'poison_acc'}

DEFAULT_SETUP = {

    'dataset': {
        'manifest': '',
        'prepared_dir': '',
        'seed': 42,
        'dev_fraction': 1.0
    },

    'features': {
        'enable_metadata': True,
        'geohash': True,
        'cyclical': True
    },

    'model': {
        'kind': 'mlp',
        'hidden_dim': 4096,
        'dropout': 0.2,
        'n_heads': 8,
        'ffn_dim': 0,  # 0 means 4 * d_model
        'meta_hidden': 256,
        'aux_heads': {
            'poison': True,
            'taxonomy': []
        }
    },

    'loss': {
        'kind': 'seesaw',
        'alpha': 0.1,
        'gamma': 2.0,
        'p': 0.8,
        'q': 2.0,
        'class_weighting': False,
        'weighted_taxonomy': False,
        'aux_weights': {}  # rank -> beta, missing ranks get 0.1
    },

    'sampler': {
        'enabled': True,
        'floor_eps': 0.01
    },

    'train': {
        'epochs': 30,
        'batch': 512,
        'lr': 1e-4,
        'weight_decay': 0.01,
        'seed': 0,
        'top_k': 2,
        'rank_metric': 'track3',
        'precision': 'single',
        'grad_clip': Constants.GRAD_CLIP_NORM,
        'workers': 1,
        'scheduler': {
            'kind': 'cosine_warm_restarts',
            'eta_min': 0.0,
            't0': 10,
            't_mult': 2,
            'factor': 0.1,
            'patience': 2,
            'threshold': 1e-4,
            'monitor': 'val_loss'
        }
    },

    'eval': {
        'costs': {
            'poisonous_as_edible': Constants.COST_POISONOUS_AS_EDIBLE,
            'edible_as_poisonous': Constants.COST_EDIBLE_AS_POISONOUS
        }
    },

    'synth': {
        'n_classes': 10,
        'dim': 64,
        'n_samples': 5000,
        'imbalance_exponent': 1.0,
        'poison_fraction': 0.3,
        'separation': 4.0,
        'val_fraction': 0.15,
        'n_unknown_species': 1,
        'seed': 0
    }
}

# free-form mappings: keys are checked by validate() rather than by the merge
OPEN_SECTIONS = {('loss', 'aux_weights')}


def _merge(target, source, path=()):
    for key, value in source.items():
        where = path + (key,)
        if key not in target and path not in OPEN_SECTIONS:
            raise SettingsError('Unknown setting: %s' % '.'.join(where))
        if isinstance(target.get(key), dict):
            if not isinstance(value, dict):
                raise SettingsError('Setting %s must be a section, got %r' % ('.'.join(where), value))
            if where in OPEN_SECTIONS:
                target[key] = dict(target[key], **value)
            else:
                _merge(target[key], value, where)
        else:
            target[key] = value

def parse_override(expr):
    '''
    "train.lr=1e-3" -> (['train', 'lr'], 0.001)
    Values are JSON literals, anything else is kept as a string
    '''
    if '=' not in expr:
        raise SettingsError('Override must look like key.path=value, got %r' % expr)
    key, raw = expr.split('=', 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip().split('.'), value

def apply_override(settings, keys, value):
    source = value
    for k in reversed(keys):
        source = {k: source}
    _merge(settings, source)

def _check(cond, field, msg):
    if not cond:
        raise SettingsError('Invalid setting %s: %s' % (field, msg))

def _number(settings, field):
    section, value = settings, None
    for k in field.split('.'):
        section = value = section[k]
    _check(isinstance(value, (int, float)) and not isinstance(value, bool), field, 'must be a number, got %r' % (value,))
    return value

def validate(settings):
    s = settings
    _check(0 < _number(s, 'dataset.dev_fraction') <= 1, 'dataset.dev_fraction', 'must be in (0, 1]')
    _check(s['model']['kind'] in MODELS, 'model.kind', 'must be one of %s' % MODELS)
    _check(_number(s, 'model.hidden_dim') >= 1, 'model.hidden_dim', 'must be positive')
    _check(0 <= _number(s, 'model.dropout') < 1, 'model.dropout', 'must be in [0, 1)')
    _check(_number(s, 'model.n_heads') >= 1, 'model.n_heads', 'must be positive')
    _check(_number(s, 'model.ffn_dim') >= 0, 'model.ffn_dim', 'must be nonnegative')
    _check(_number(s, 'model.meta_hidden') >= 1, 'model.meta_hidden', 'must be positive')
    ranks = s['model']['aux_heads']['taxonomy']
    _check(isinstance(ranks, list) and all(r in Metadata_Columns.taxonomy for r in ranks),
        'model.aux_heads.taxonomy', 'must be a list drawn from %s' % Metadata_Columns.taxonomy)

    _check(s['loss']['kind'] in LOSSES, 'loss.kind', 'must be one of %s' % LOSSES)
    for name in ('alpha', 'gamma', 'p', 'q'):
        _check(_number(s, 'loss.' + name) >= 0, 'loss.' + name, 'must be nonnegative')
    for rank, beta in s['loss']['aux_weights'].items():
        _check(rank in Metadata_Columns.taxonomy, 'loss.aux_weights.' + rank, 'unknown taxonomy rank')
        _check(isinstance(beta, (int, float)) and beta >= 0, 'loss.aux_weights.' + rank, 'must be nonnegative')
    _check(s['loss']['alpha'] == 0 or s['model']['aux_heads']['poison'], 'loss.alpha',
        'poison loss weight requires model.aux_heads.poison')

    _check(0 < _number(s, 'sampler.floor_eps') <= 1, 'sampler.floor_eps', 'must be in (0, 1]')

    for name in ('epochs', 'batch', 'top_k', 'workers'):
        _check(_number(s, 'train.' + name) >= 1, 'train.' + name, 'must be positive')
    _check(_number(s, 'train.lr') > 0, 'train.lr', 'must be positive')
    _check(_number(s, 'train.weight_decay') >= 0, 'train.weight_decay', 'must be nonnegative')
    _check(_number(s, 'train.grad_clip') >= 0, 'train.grad_clip', 'must be nonnegative (0 disables clipping)')
    _check(s['train']['rank_metric'] in RANK_METRICS, 'train.rank_metric', 'must be one of %s' % RANK_METRICS)
    _check(s['train']['precision'] in PRECISIONS, 'train.precision', 'must be one of %s' % PRECISIONS)
    sch = s['train']['scheduler']
    _check(sch['kind'] in SCHEDULERS, 'train.scheduler.kind', 'must be one of %s' % SCHEDULERS)
    _check(0 <= _number(s, 'train.scheduler.eta_min') <= s['train']['lr'], 'train.scheduler.eta_min', 'must lie in [0, train.lr]')
    _check(_number(s, 'train.scheduler.t0') >= 1, 'train.scheduler.t0', 'must be >= 1')
    _check(_number(s, 'train.scheduler.t_mult') >= 1, 'train.scheduler.t_mult', 'must be >= 1')
    _check(0 < _number(s, 'train.scheduler.factor') < 1, 'train.scheduler.factor', 'must be in (0, 1)')
    _check(_number(s, 'train.scheduler.patience') >= 0, 'train.scheduler.patience', 'must be nonnegative')
    _check(sch['monitor'] in RANK_METRICS, 'train.scheduler.monitor', 'must be one of %s' % RANK_METRICS)

    for name in ('poisonous_as_edible', 'edible_as_poisonous'):
        _check(_number(s, 'eval.costs.' + name) >= 0, 'eval.costs.' + name, 'must be nonnegative')

    _check(_number(s, 'synth.n_classes') >= 2, 'synth.n_classes', 'must be >= 2')
    _check(_number(s, 'synth.dim') >= 2, 'synth.dim', 'must be >= 2')
    _check(0 <= _number(s, 'synth.poison_fraction') <= 1, 'synth.poison_fraction', 'must be in [0, 1]')
    _check(0 < _number(s, 'synth.val_fraction') < 1, 'synth.val_fraction', 'must be in (0, 1)')
    return settings

def load_settings(path=None, overrides=()):
    '''
    Resolves the run configuration:
    defaults <- user JSON file <- key.path=value overrides
    @returns settings dict with every default materialized
    '''
    settings = copy.deepcopy(DEFAULT_SETUP)
    if path:
        if not os.path.exists(path):
            raise SettingsError('Settings file %s not found' % path)
        try:
            user = read_json(path)
        except Exception as e:
            raise SettingsError('Your %s seems to be bad-formatted: %s' % (path, e))
        if not isinstance(user, dict):
            raise SettingsError('Settings file %s must hold a JSON object' % path)
        _merge(settings, user)
    for expr in overrides:
        keys, value = parse_override(expr)
        apply_override(settings, keys, value)
    return validate(settings)

def write_settings(settings, path):
    write_json(path, settings)

def derive_seed(root_seed, stream):
    '''
    Named per-component random stream: split, synth, init, dropout, sampler
    '''
    return stable_hash('%d:%s' % (int(root_seed), stream)) % (2**32)

def thread_count():
    raw = os.environ.get(THREADS_ENV, '1')
    try:
        n = int(raw)
    except ValueError:
        raise SettingsError('%s must be an integer, got %r' % (THREADS_ENV, raw))
    return max(1, n)

def is_higher_better(metric):
    return metric in HIGHER_IS_BETTER
