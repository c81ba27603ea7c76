# Classifier heads over frozen embeddings: MLP and transformer fusion

import math
import logging
from collections import OrderedDict

import numpy as np

from embedhead.core.common import ModelError, FormatError, hrsize
from embedhead.core import tensor as T
from embedhead.core.constants import Constants
from embedhead.parsers.ckpt import CheckpointFile


logger = logging.getLogger('embedhead')


class HeadConfig:
    kind = None
    fields = ['embed_dim', 'meta_dim', 'n_classes', 'dropout', 'poison', 'taxonomy']

    def __init__(self, embed_dim, meta_dim, n_classes, dropout=0.2, poison=True, taxonomy=None):
        self.embed_dim = int(embed_dim)
        self.meta_dim = int(meta_dim)
        self.n_classes = int(n_classes)
        self.dropout = float(dropout)
        self.poison = bool(poison)
        self.taxonomy = OrderedDict(sorted((taxonomy or {}).items()))  # rank -> label count

    @property
    def input_dim(self):
        return self.embed_dim + self.meta_dim

    def validate(self):
        if self.embed_dim < 1 or self.meta_dim < 0:
            raise ModelError('Invalid head dimensions: embedding %s, metadata %s' % (self.embed_dim, self.meta_dim))
        if self.n_classes < 2:
            raise ModelError('A head needs n_classes >= 2, got %s' % self.n_classes)
        if not 0 <= self.dropout < 1:
            raise ModelError('Dropout %s outside [0, 1)' % self.dropout)
        for rank, size in self.taxonomy.items():
            if size < 1:
                raise ModelError('Taxonomy head %s has no labels' % rank)
        return self

    def todict(self):
        out = {'kind': self.kind}
        for name in self.fields:
            out[name] = getattr(self, name)
        out['taxonomy'] = dict(self.taxonomy)
        return out

class MLPHeadConfig(HeadConfig):
    kind = 'mlp'
    fields = HeadConfig.fields + ['hidden_dim']

    def __init__(self, embed_dim, meta_dim, n_classes, hidden_dim=4096, **kwargs):
        super(MLPHeadConfig, self).__init__(embed_dim, meta_dim, n_classes, **kwargs)
        self.hidden_dim = int(hidden_dim)

    def validate(self):
        if self.hidden_dim < 1:
            raise ModelError('hidden_dim must be positive, got %s' % self.hidden_dim)
        return super(MLPHeadConfig, self).validate()

class TransformerFusionConfig(HeadConfig):
    kind = 'fusion'
    fields = HeadConfig.fields + ['meta_hidden', 'n_heads', 'ffn_dim']

    def __init__(self, embed_dim, meta_dim, n_classes, meta_hidden=256, n_heads=8, ffn_dim=0, **kwargs):
        super(TransformerFusionConfig, self).__init__(embed_dim, meta_dim, n_classes, **kwargs)
        self.meta_hidden = int(meta_hidden)
        self.n_heads = int(n_heads)
        self.ffn_dim = int(ffn_dim) or 4 * self.embed_dim

    @property
    def d_model(self):
        return self.embed_dim

    def validate(self):
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ModelError('d_model %s is not divisible by %s attention heads' % (self.d_model, self.n_heads))
        if self.meta_hidden < 1 or self.ffn_dim < 1:
            raise ModelError('Invalid fusion widths: meta_hidden %s, ffn_dim %s' % (self.meta_hidden, self.ffn_dim))
        return super(TransformerFusionConfig, self).validate()

HEAD_CONFIGS = {cls.kind: cls for cls in (MLPHeadConfig, TransformerFusionConfig)}

def config_fromdict(obj):
    if obj.get('kind') not in HEAD_CONFIGS:
        raise ModelError('Unknown head kind: %s' % obj.get('kind'))
    cls = HEAD_CONFIGS[obj['kind']]
    kwargs = {name: obj[name] for name in cls.fields if name in obj}
    missing = [name for name in cls.fields if name not in obj]
    if missing:
        raise ModelError('Head config lacks %s' % ', '.join(missing))
    return cls(**kwargs).validate()

def config_from_settings(settings, embed_dim, meta_dim, n_classes, taxonomy_sizes):
    m = settings['model']
    common = dict(dropout=m['dropout'], poison=m['aux_heads']['poison'],
        taxonomy={rank: taxonomy_sizes[rank] for rank in m['aux_heads']['taxonomy'] if rank in taxonomy_sizes})
    if m['kind'] == 'fusion':
        return TransformerFusionConfig(embed_dim, meta_dim, n_classes, meta_hidden=m['meta_hidden'],
            n_heads=m['n_heads'], ffn_dim=m['ffn_dim'], **common).validate()
    return MLPHeadConfig(embed_dim, meta_dim, n_classes, hidden_dim=m['hidden_dim'], **common).validate()


class HeadOutput:
    def __init__(self, class_logits, poison_logit=None, taxonomy_logits=None):
        self.class_logits = class_logits
        self.poison_logit = poison_logit
        self.taxonomy_logits = taxonomy_logits or OrderedDict()

    def arrays(self):
        out = OrderedDict([('class', self.class_logits)])
        if self.poison_logit is not None:
            out['poison'] = self.poison_logit
        for rank, logits in self.taxonomy_logits.items():
            out['taxonomy.' + rank] = logits
        return out


def _output_heads(config):
    heads = [('class', config.n_classes)]
    if config.poison:
        heads.append(('poison', 1))
    heads += [('taxonomy.' + rank, size) for rank, size in config.taxonomy.items()]
    return heads

def parameter_shapes(config):
    shapes = OrderedDict()
    if config.kind == 'mlp':
        shapes['hidden.weight'] = (config.input_dim, config.hidden_dim)
        shapes['hidden.bias'] = (config.hidden_dim,)
        trunk = config.hidden_dim
    else:
        d, f = config.d_model, config.ffn_dim
        if config.meta_dim:
            shapes['meta.0.weight'] = (config.meta_dim, config.meta_hidden)
            shapes['meta.0.bias'] = (config.meta_hidden,)
            shapes['meta.1.weight'] = (config.meta_hidden, d)
            shapes['meta.1.bias'] = (d,)
        for ln in ('ln1', 'ln2', 'ln_out'):
            shapes[ln + '.gain'] = (d,)
            shapes[ln + '.bias'] = (d,)
        for proj in ('query', 'key', 'value', 'out'):
            shapes['attn.%s.weight' % proj] = (d, d)
            shapes['attn.%s.bias' % proj] = (d,)
        shapes['ffn.0.weight'] = (d, f)
        shapes['ffn.0.bias'] = (f,)
        shapes['ffn.1.weight'] = (f, d)
        shapes['ffn.1.bias'] = (d,)
        trunk = d
    for name, width in _output_heads(config):
        shapes[name + '.weight'] = (trunk, width)
        shapes[name + '.bias'] = (width,)
    return shapes

def init_head(config, seed):
    '''
    Weights feeding a GELU draw from U(-sqrt(6/fan_in), sqrt(6/fan_in)),
    all other weights from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero,
    layer-norm gains one, the last metadata projection zero
    '''
    config.validate()
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith('.gain'):
            data = np.ones(shape)
        elif name.endswith('.bias') or name == 'meta.1.weight':
            data = np.zeros(shape)
        else:
            fan_in = shape[0]
            bound = math.sqrt(6.0 / fan_in) if name in ('hidden.weight', 'meta.0.weight', 'ffn.0.weight') else 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = T.Tensor(data, requires_grad=True, name=name)
    return params

def count_parameters(params):
    return int(sum(p.size for p in params.values()))

def parameter_bytes(params):
    '''
    Single-precision storage size of the parameters
    '''
    return 4 * count_parameters(params)


def _check_inputs(config, embeddings, meta):
    embeddings = T.as_tensor(embeddings)
    if embeddings.data.ndim != 2 or embeddings.shape[1] != config.embed_dim:
        raise ModelError('Embedding batch of shape %s, head expects [N, %s]' % (list(embeddings.shape), config.embed_dim))
    if config.meta_dim:
        meta = T.as_tensor(meta)
        if meta.shape != (embeddings.shape[0], config.meta_dim):
            raise ModelError('Metadata batch of shape %s, head expects [%s, %s]' % (list(meta.shape), embeddings.shape[0], config.meta_dim))
    return embeddings, meta

def _linear(params, name, x):
    return T.add(T.matmul(x, params[name + '.weight']), params[name + '.bias'])

def _heads(params, config, trunk):
    class_logits = _linear(params, 'class', trunk)
    poison = T.reshape(_linear(params, 'poison', trunk), (trunk.shape[0],)) if config.poison else None
    taxonomy = OrderedDict((rank, _linear(params, 'taxonomy.' + rank, trunk)) for rank in config.taxonomy)
    return HeadOutput(class_logits, poison, taxonomy)

def forward_mlp(params, config, embeddings, meta, train=False, rng=None):
    '''
    concat(embedding, metadata) -> linear -> GELU -> dropout -> parallel output heads
    '''
    embeddings, meta = _check_inputs(config, embeddings, meta)
    x = T.concat([embeddings, meta]) if config.meta_dim else embeddings
    h = T.gelu(_linear(params, 'hidden', x))
    h = T.dropout(h, config.dropout, train, rng)
    return _heads(params, config, h)

def _attention(params, x, n_heads):
    '''
    Multi-head self-attention over x of shape [N, tokens, d]
    '''
    n, t, d = x.shape
    dh = d // n_heads

    def split(name):
        proj = _linear(params, 'attn.%s' % name, x)
        return T.transpose(T.reshape(proj, (n, t, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = split('query'), split('key'), split('value')
    scores = T.scale(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    context = T.bmm(T.softmax(scores), v)
    merged = T.reshape(T.transpose(context, (0, 2, 1, 3)), (n, t, d))
    return _linear(params, 'attn.out', merged)

def forward_fusion(params, config, embeddings, meta, train=False, rng=None):
    '''
    x = embedding + MetaMLP(metadata), run as a single token through one pre-norm encoder block
    '''
    embeddings, meta = _check_inputs(config, embeddings, meta)
    x = embeddings
    if config.meta_dim:
        projected = _linear(params, 'meta.1', T.gelu(_linear(params, 'meta.0', meta)))
        x = T.add(x, projected)
    n, d = x.shape
    x = T.reshape(x, (n, 1, d))
    eps = Constants.LAYER_NORM_EPS

    attended = _attention(params, T.layer_norm(x, params['ln1.gain'], params['ln1.bias'], eps), config.n_heads)
    x = T.add(x, T.dropout(attended, config.dropout, train, rng))
    hidden = T.gelu(_linear(params, 'ffn.0', T.layer_norm(x, params['ln2.gain'], params['ln2.bias'], eps)))
    x = T.add(x, T.dropout(_linear(params, 'ffn.1', hidden), config.dropout, train, rng))

    trunk = T.layer_norm(T.reshape(x, (n, d)), params['ln_out.gain'], params['ln_out.bias'], eps)
    return _heads(params, config, trunk)

FORWARDS = {'mlp': forward_mlp, 'fusion': forward_fusion}

def forward(params, config, embeddings, meta, train=False, rng=None):
    return FORWARDS[config.kind](params, config, embeddings, meta, train, rng)


def average_logits(outputs):
    '''
    Arithmetic mean of every logit position over the heads of an ensemble
    '''
    if not outputs:
        raise ModelError('Cannot average an empty list of head outputs')
    arrays = [o.arrays() for o in outputs]
    first = arrays[0]
    for other in arrays[1:]:
        if list(other) != list(first):
            raise ModelError('Ensemble members expose different outputs: %s vs %s' % (list(first), list(other)))
        for key in first:
            if other[key].shape != first[key].shape:
                raise ModelError('Ensemble output %s shapes differ: %s vs %s' % (key, list(first[key].shape), list(other[key].shape)))
    mean = OrderedDict()
    for key in first:
        mean[key] = T.Tensor(sum(a[key].data for a in arrays) / len(arrays))
    taxonomy = OrderedDict((key[len('taxonomy.'):], value) for key, value in mean.items() if key.startswith('taxonomy.'))
    return HeadOutput(mean['class'], mean.get('poison'), taxonomy)

def predict_proba(output):
    '''
    @returns (class probabilities [N, C], poison probabilities [N] or None)
    '''
    probs = T._softmax(output.class_logits.data)
    poison = None
    if output.poison_logit is not None:
        poison = np.exp(-np.logaddexp(0.0, -output.poison_logit.data))
    return probs, poison


def round_to_storage(params):
    '''
    Rounds parameters in place to the single-precision values a checkpoint stores
    '''
    for p in params.values():
        p.data[...] = p.data.astype(np.float32)

def save_checkpoint(params, meta, path):
    '''
    meta must carry the head config under "config"; epoch, seed and metrics are echoed as given
    '''
    if 'config' not in meta:
        raise ModelError('Checkpoint metadata lacks the head config')
    CheckpointFile.write(path, OrderedDict((name, p.data) for name, p in params.items()), meta)
    logger.debug('Saved checkpoint %s (%s parameters, %s)' % (path, count_parameters(params), hrsize(parameter_bytes(params))))

def check_compatible(config, expected):
    '''
    expected: dict of head config fields the caller relies on
    '''
    actual = config.todict()
    for field, value in expected.items():
        if field in actual and actual[field] != value:
            raise ModelError('Checkpoint config mismatch in %s: expected %s, found %s' % (field, value, actual[field]))

def load_checkpoint(path, expected=None):
    '''
    @returns (OrderedDict of parameter tensors, meta dict)
    '''
    arrays, meta = CheckpointFile.read(path)
    if 'config' not in meta:
        raise FormatError('%s: checkpoint lacks the head config' % path)
    config = config_fromdict(meta['config'])
    if expected:
        check_compatible(config, expected)
    shapes = parameter_shapes(config)
    if list(shapes) != list(arrays):
        raise ModelError('%s: parameter names do not match a %s head' % (path, config.kind))
    params = OrderedDict()
    for name, shape in shapes.items():
        if tuple(arrays[name].shape) != shape:
            raise ModelError('%s: parameter %s has shape %s, config implies %s' % (path, name, list(arrays[name].shape), list(shape)))
        params[name] = T.Tensor(arrays[name].astype(np.float64), requires_grad=True, name=name)
    return params, meta

def batched_forward(params, config, embeddings, meta, batch=1024):
    '''
    Eval-mode forward in chunks; returns a HeadOutput of plain arrays wrapped as tensors
    '''
    parts = []
    for lo in range(0, len(embeddings), batch):
        hi = lo + batch
        out = forward(params, config, embeddings[lo:hi], meta[lo:hi] if config.meta_dim else None)
        parts.append(out.arrays())
    if not parts:
        raise ModelError('Nothing to predict')
    merged = OrderedDict((key, T.Tensor(np.concatenate([p[key].data for p in parts]))) for key in parts[0])
    taxonomy = OrderedDict((key[len('taxonomy.'):], value) for key, value in merged.items() if key.startswith('taxonomy.'))
    return HeadOutput(merged['class'], merged.get('poison'), taxonomy)

def ensemble_forward(members, embeddings, meta, batch=1024):
    '''
    members: list of (params, config); logits are averaged over the members
    '''
    if not members:
        raise ModelError('An ensemble needs at least one member')
    first = members[0][1].todict()
    for _, config in members[1:]:
        other = config.todict()
        for field in ('n_classes', 'embed_dim', 'meta_dim', 'poison', 'taxonomy'):
            if other[field] != first[field]:
                raise ModelError('Ensemble members disagree on %s: %s vs %s' % (field, first[field], other[field]))
    return average_logits([batched_forward(params, config, embeddings, meta, batch) for params, config in members])
