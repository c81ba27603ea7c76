# Functionality exposed as an API: the steps a run is made of, bound to one resolved configuration

import os
import copy
import time
import logging
from collections import OrderedDict

import numpy as np

from embedhead import __version__
from embedhead.core.common import DatasetError, ModelError, TrainingError, read_json, write_json, write_csv, fmt_float
from embedhead.core.constants import Constants, Metadata_Columns
from embedhead.core.settings import DEFAULT_SETUP, derive_seed, validate, write_settings
from embedhead.core import dataset, features, model, losses, trainer, metrics
from embedhead.core import tensor as T


logger = logging.getLogger('embedhead')

SPLIT_FILE = 'split.json'
CATALOG_FILE = 'catalog.json'
SCHEMA_FILE = 'schema.json'
PREPARE_FILE = 'prepare.json'
SETTINGS_FILE = 'settings.json'

PREDICTION_COLUMNS = ['observation_id', 'predicted_class_index', 'predicted_species', 'poison_probability', 'top3_indices']

ABLATION_VARIANTS = ['baseline', 'class_weighting', 'metadata', 'toxicity', 'taxonomy', 'weighted_taxonomy']


class Prepared:
    '''
    Everything cmd_prepare fixed for a dataset: pools, class catalog, split and metadata schema
    '''
    def __init__(self, train_records, val_records, catalog, split, schema, dim):
        self.train_records = train_records
        self.val_records = val_records
        self.catalog = catalog
        self.split = split
        self.schema = schema
        self.dim = dim

    def taxonomy_sizes(self):
        return {rank: len(m['labels']) for rank, m in self.catalog.taxonomy_maps.items()}


class API:
    version = __version__

    def __init__(self, settings=None):
        self.settings = settings if settings is not None else validate(copy.deepcopy(DEFAULT_SETUP))

    def _artifact(self, obj):
        obj = dict(obj)
        obj['resolved_config'] = self.settings
        obj['version'] = self.version
        return obj

    def synth(self, out_dir):
        '''
        Writes a synthetic dataset (EMB1 + CSV per pool) and its manifest
        @returns manifest path
        '''
        s = self.settings['synth']
        train, val = dataset.make_synthetic(s['n_classes'], s['dim'], s['n_samples'], s['imbalance_exponent'],
            s['poison_fraction'], s['seed'], s['separation'], s['val_fraction'], s['n_unknown_species'])
        _, path = dataset.write_dataset(OrderedDict([('train', train), ('val', val)]), out_dir, s['dim'], 'synthetic')
        logger.info('Synthetic manifest written to %s' % path)
        return path

    def _load_pools(self, manifest_path, dev_fraction, seed):
        manifest = dataset.DatasetManifest.load(manifest_path)
        for pool in ('train', 'val'):
            if pool not in manifest.pools:
                raise DatasetError('Manifest %s lacks the %s pool' % (manifest_path, pool))
        train = dataset.load_dataset(manifest, 'train')
        val = dataset.load_dataset(manifest, 'val')
        if dev_fraction < 1:
            train = dataset.stratified_subsample(train, dev_fraction, derive_seed(seed, 'dev:train'))
            val = dataset.stratified_subsample(val, dev_fraction, derive_seed(seed, 'dev:val'))
            logger.info('Development subset: %s training and %s validation records' % (len(train), len(val)))
        return train, val, manifest.dim

    def prepare(self, manifest_path, out_dir):
        '''
        Fixes class catalog, three-way split and metadata schema for a manifest
        '''
        ds = self.settings['dataset']
        train, val, dim = self._load_pools(manifest_path, ds['dev_fraction'], ds['seed'])
        catalog = dataset.build_class_catalog(train, val)
        split = dataset.stratified_three_way_split(val, derive_seed(ds['seed'], 'split'))
        f = self.settings['features']
        schema = features.build_schema(train, f['enable_metadata'], f['cyclical'], f['geohash'])
        logger.info('Catalog of %s classes (%s poisonous), metadata width %s' % (catalog.n_classes, int(catalog.poison_map.sum()), schema.width))

        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, SPLIT_FILE), self._artifact(split.todict()))
        write_json(os.path.join(out_dir, CATALOG_FILE), self._artifact(catalog.todict()))
        write_json(os.path.join(out_dir, SCHEMA_FILE), self._artifact(schema.todict()))
        write_json(os.path.join(out_dir, PREPARE_FILE), self._artifact({
            'manifest': os.path.abspath(manifest_path),
            'dev_fraction': ds['dev_fraction'],
            'seed': ds['seed'],
            'dim': dim
        }))
        write_settings(self.settings, os.path.join(out_dir, SETTINGS_FILE))
        return Prepared(train, val, catalog, split, schema, dim)

    def load_prepared(self, prepared_dir):
        for name in (SPLIT_FILE, CATALOG_FILE, SCHEMA_FILE, PREPARE_FILE):
            if not os.path.isfile(os.path.join(prepared_dir, name)):
                raise DatasetError('%s not found in %s, run prepare first' % (name, prepared_dir))
        info = read_json(os.path.join(prepared_dir, PREPARE_FILE))
        train, val, dim = self._load_pools(info['manifest'], info['dev_fraction'], info['seed'])
        catalog = dataset.ClassCatalog.fromdict(read_json(os.path.join(prepared_dir, CATALOG_FILE)))
        split = dataset.SplitAssignment.fromdict(read_json(os.path.join(prepared_dir, SPLIT_FILE)))
        schema = features.MetadataSchema.fromdict(read_json(os.path.join(prepared_dir, SCHEMA_FILE)))
        f = self.settings['features']
        if (f['enable_metadata'], f['cyclical'], f['geohash']) != (schema.enable_metadata, schema.cyclical, schema.geohash):
            schema = features.MetadataSchema(schema.vocabularies, f['enable_metadata'], f['cyclical'], f['geohash'])
        return Prepared(train, val, catalog, split, schema, dim)

    def head_config(self, prepared, schema=None):
        schema = schema or prepared.schema
        return model.config_from_settings(self.settings, prepared.dim, schema.width, prepared.catalog.n_classes, prepared.taxonomy_sizes())

    def train(self, prepared, out_dir, fold):
        '''
        Fits the configured head on one fold
        @returns trainer.FitResult
        '''
        train_data, val_data, _ = trainer.build_slices(prepared.train_records, prepared.val_records, prepared.split, fold, prepared.catalog, prepared.schema)
        result = trainer.fit(train_data, val_data, prepared.catalog, self.head_config(prepared), self.settings, out_dir, fold,
            {'catalog': prepared.catalog.todict(), 'schema': prepared.schema.todict()})
        write_settings(self.settings, os.path.join(out_dir, SETTINGS_FILE))
        return result

    def cross_validate(self, prepared, out_dir):
        '''
        Both folds, then the two best checkpoints evaluated alone and as an ensemble on the shared test slice
        '''
        results, test_slice = trainer.run_cross_validation(prepared.train_records, prepared.val_records, prepared.split,
            prepared.catalog, prepared.schema, self.settings, out_dir)
        if test_slice.reads:
            raise TrainingError('Held-out test slice was read during training')
        self.evaluate([r.best for r in results], prepared, out_dir, section='test')
        return results

    def load_members(self, paths, prepared=None):
        members, metas = [], []
        for path in paths:
            expected = None
            if prepared is not None:
                expected = {'n_classes': prepared.catalog.n_classes, 'embed_dim': prepared.dim}
            params, meta = model.load_checkpoint(path, expected)
            members.append((params, model.config_fromdict(meta['config'])))
            metas.append(meta)
        return members, metas

    def _section(self, prepared, section, fold):
        train_data, val_data, test_data = trainer.build_slices(prepared.train_records, prepared.val_records, prepared.split, fold, prepared.catalog, prepared.schema)
        return {'train': train_data, 'validation': val_data, 'test': test_data}[section]

    def evaluate(self, checkpoint_paths, prepared, out_dir, section='test', fold=0):
        '''
        Writes report.json and per_class.csv for the (ensembled) checkpoints,
        plus benchmark.csv comparing each checkpoint with the ensemble when there are several
        @returns report dict
        '''
        members, metas = self.load_members(checkpoint_paths, prepared)
        for (params, config), path in zip(members, checkpoint_paths):
            if config.meta_dim != prepared.schema.width:
                raise ModelError('Checkpoint config mismatch in meta_dim: expected %s, found %s (%s)' % (prepared.schema.width, config.meta_dim, path))
        data = self._section(prepared, section, fold)
        costs = metrics.CostMatrixConfig.from_settings(self.settings)
        scores, per_class, _ = metrics.evaluate_run(members, data, prepared.catalog, costs)

        os.makedirs(out_dir, exist_ok=True)
        report = scores.todict()
        report['section'] = section
        report['checkpoints'] = [os.path.basename(p) for p in checkpoint_paths]
        write_json(os.path.join(out_dir, 'report.json'), self._artifact(report))
        write_csv(os.path.join(out_dir, 'per_class.csv'), ['class', 'support', 'precision', 'recall', 'f1'],
            [(name, support, fmt_float(p), fmt_float(r), fmt_float(f)) for name, support, p, r, f in per_class])

        if len(members) > 1:
            named = []
            for member, path in zip(members, checkpoint_paths):
                single, _, _ = metrics.evaluate_run([member], data, prepared.catalog, costs)
                named.append((os.path.basename(path), single))
            named.append(('ensemble', scores))
            write_csv(os.path.join(out_dir, 'benchmark.csv'), ['name', 'accuracy', 'track1', 'track2', 'track3', 'macro_f1'],
                [[row[0]] + [fmt_float(x) for x in row[1:]] for row in metrics.benchmark_table(named)])
        logger.info('Report on %s records: track1 %.4f track2 %.4f track3 %.4f' % (scores.n_samples, scores.track1, scores.track2, scores.track3))
        return report

    def predict(self, checkpoint_paths, manifest_path, out_csv, pool=None, batch=1024):
        '''
        Labels every record of a manifest pool; catalog and schema come from the first checkpoint
        @returns number of rows written
        '''
        members, metas = self.load_members(checkpoint_paths)
        if 'catalog' not in metas[0] or 'schema' not in metas[0]:
            raise ModelError('%s carries no class catalog or metadata schema' % checkpoint_paths[0])
        catalog = dataset.ClassCatalog.fromdict(metas[0]['catalog'])
        schema = features.MetadataSchema.fromdict(metas[0]['schema'])
        for (params, config), path in zip(members, checkpoint_paths):
            model.check_compatible(config, {'n_classes': catalog.n_classes, 'meta_dim': schema.width})

        records = dataset.load_dataset(manifest_path, pool, require_labels=False)
        started = time.time()
        embeddings = np.array([r.embedding for r in records], dtype=np.float64).reshape(len(records), -1)
        output = model.ensemble_forward(members, embeddings, features.encode_many(records, schema), batch)
        probs, poison = model.predict_proba(output)
        if poison is None:
            poison = probs[:, catalog.poison_map].sum(axis=1)
        top = metrics.topk_indices(output.class_logits.data, min(3, catalog.n_classes))
        elapsed = time.time() - started

        rows = []
        for n, record in enumerate(records):
            c = int(top[n, 0])
            rows.append([record.observation_id, c, catalog.species_names[c], fmt_float(poison[n]), ' '.join(str(int(i)) for i in top[n])])
        write_csv(out_csv, PREDICTION_COLUMNS, rows)
        per_image = elapsed / max(1, len(records))
        write_json(out_csv + '.timing.json', self._artifact({'n_records': len(records), 'total_seconds': elapsed, 'seconds_per_image': per_image}))
        logger.info('Predicted %s records in %.3fs (%.6fs per image)' % (len(records), elapsed, per_image))
        return len(rows)

    def ablate(self, prepared, out_dir, fold=0):
        '''
        Cumulative variants on one fold with the MLP head, each compared by best validation top-1
        @returns rows (variant, top1, difference to baseline)
        '''
        rows, baseline = [], None
        for n, variant in enumerate(ABLATION_VARIANTS):
            settings = ablation_settings(self.settings, ABLATION_VARIANTS[:n + 1], prepared.taxonomy_sizes())
            sub = API(settings)
            f = settings['features']
            schema = features.MetadataSchema(prepared.schema.vocabularies, f['enable_metadata'], f['cyclical'], f['geohash'])
            variant_prepared = Prepared(prepared.train_records, prepared.val_records, prepared.catalog, prepared.split, schema, prepared.dim)
            result = sub.train(variant_prepared, os.path.join(out_dir, variant), fold)
            top1 = max(row['top1'] for row in result.history)
            baseline = top1 if baseline is None else baseline
            rows.append((variant, top1, top1 - baseline))
            logger.info('Ablation %s: top1 %.4f (%+.4f)' % (variant, top1, top1 - baseline))
        write_csv(os.path.join(out_dir, 'ablation.csv'), ['variant', 'top1', 'difference'],
            [(v, fmt_float(t), fmt_float(d)) for v, t, d in rows])
        return rows


def ablation_settings(base, variants, taxonomy_sizes):
    '''
    Settings for the cumulative ablation step whose components are listed in variants
    '''
    s = copy.deepcopy(base)
    s['model']['kind'] = 'mlp'
    s['loss'].update({'kind': 'ce', 'class_weighting': False, 'weighted_taxonomy': False, 'alpha': 0.0})
    s['sampler']['enabled'] = False
    s['features']['enable_metadata'] = False
    s['model']['aux_heads'] = {'poison': False, 'taxonomy': []}
    if 'class_weighting' in variants:
        s['loss']['class_weighting'] = True
    if 'metadata' in variants:
        s['features']['enable_metadata'] = True
    if 'toxicity' in variants:
        s['model']['aux_heads']['poison'] = True
        s['loss']['alpha'] = base['loss']['alpha'] or 0.1
    if 'taxonomy' in variants:
        s['model']['aux_heads']['taxonomy'] = [r for r in Metadata_Columns.taxonomy if r in taxonomy_sizes]
    if 'weighted_taxonomy' in variants:
        s['loss']['weighted_taxonomy'] = True
    return validate(s)


def _gradcheck_ops(rng):
    '''
    (name, function, params) for every differentiable op, each reduced to a scalar by a fixed random projection
    '''
    def leaf(*shape, positive=False, away_from_zero=False):
        data = rng.standard_normal(shape)
        if positive:
            data = np.abs(data) + 0.5
        if away_from_zero:
            data = np.sign(data) * (np.abs(data) + 0.1)
        return T.Tensor(data, requires_grad=True)

    def project(out):
        weights = np.random.default_rng(7).standard_normal(out.shape)
        return T.reduce_sum(T.mul(out, weights))

    a, b, v = leaf(3, 4), leaf(4, 5), leaf(4)
    c, d = leaf(2, 3, 4), leaf(2, 4, 3)
    p = leaf(3, 4, positive=True)
    r = leaf(3, 4, away_from_zero=True)
    g, bias = leaf(4), leaf(4)
    idx = rng.integers(0, 4, size=3)
    return [
        ('matmul', lambda: project(T.matmul(a, b)), [a, b]),
        ('bmm', lambda: project(T.bmm(c, d)), [c, d]),
        ('add', lambda: project(T.add(a, v)), [a, v]),
        ('sub', lambda: project(T.sub(a, v)), [a, v]),
        ('mul', lambda: project(T.mul(a, v)), [a, v]),
        ('scale', lambda: project(T.scale(a, 0.7)), [a]),
        ('relu', lambda: project(T.relu(r)), [r]),
        ('gelu', lambda: project(T.gelu(a)), [a]),
        ('exp', lambda: project(T.exp(a)), [a]),
        ('power', lambda: project(T.power(p, 1.7)), [p]),
        ('softplus', lambda: project(T.softplus(a)), [a]),
        ('softmax', lambda: project(T.softmax(a)), [a]),
        ('log_softmax', lambda: project(T.log_softmax(a)), [a]),
        ('layer_norm', lambda: project(T.layer_norm(a, g, bias, Constants.LAYER_NORM_EPS)), [a, g, bias]),
        ('concat', lambda: project(T.concat([a, p])), [a, p]),
        ('reduce_mean', lambda: project(T.reduce_mean(a, axis=0)), [a]),
        ('reduce_sum', lambda: project(T.reduce_sum(a, axis=1, keepdims=True)), [a]),
        ('reshape', lambda: project(T.reshape(a, (2, 6))), [a]),
        ('transpose', lambda: project(T.transpose(c, (1, 0, 2))), [c]),
        ('pick', lambda: project(T.pick(a, idx)), [a]),
        ('dropout', lambda: project(T.dropout(a, 0.3, True, np.random.default_rng(3))), [a])
    ]

def _gradcheck_model(rng, seed):
    n, dim, meta, classes = 5, 8, 3, 4
    emb, feats = rng.standard_normal((n, dim)), rng.standard_normal((n, meta))
    labels = rng.integers(0, classes, size=n)
    poison = (rng.random(n) < 0.5).astype(np.float64)
    tax = {'genus': rng.integers(-1, 3, size=n)}
    targets = {'labels': labels, 'poison': poison, 'taxonomy': tax}
    counts = rng.integers(1, 50, size=classes)
    state = losses.SeesawState(counts, 0.8, 2.0)
    weights = losses.class_weights(counts / counts.sum())

    mlp = model.MLPHeadConfig(dim, meta, classes, hidden_dim=6, dropout=0.0, poison=True, taxonomy={'genus': 3})
    fusion = model.TransformerFusionConfig(4, meta, classes, meta_hidden=3, n_heads=2, ffn_dim=4, dropout=0.0, poison=True, taxonomy={'genus': 3})
    mlp_params = model.init_head(mlp, seed)
    fusion_params = model.init_head(fusion, seed)
    # a zero metadata projection would leave its upstream gradients trivially zero
    fusion_params['meta.1.weight'].data[...] = rng.uniform(-0.5, 0.5, size=fusion_params['meta.1.weight'].shape)

    def logits(params, config):
        return model.forward(params, config, emb[:, :config.embed_dim], feats).class_logits

    z = T.Tensor(rng.standard_normal((n, classes)), requires_grad=True)
    zp = T.Tensor(rng.standard_normal(n), requires_grad=True)
    frozen = losses.seesaw_factors(z.data, labels, state)
    composite = losses.LossConfig('seesaw', 0.1, 2.0, None, {'genus': 0.1})

    # seesaw factors are frozen at the base point so the checked function is smooth
    base_out = model.forward(mlp_params, mlp, emb, feats)
    composite_frozen = losses.seesaw_factors(base_out.class_logits.data, labels, state)

    return [
        ('mlp_head', lambda: losses.cross_entropy(logits(mlp_params, mlp), labels), list(mlp_params.values())),
        ('fusion_head', lambda: losses.cross_entropy(logits(fusion_params, fusion), labels), list(fusion_params.values())),
        ('loss_ce', lambda: losses.cross_entropy(z, labels), [z]),
        ('loss_weighted_ce', lambda: losses.cross_entropy(z, labels, weights), [z]),
        ('loss_focal', lambda: losses.focal_loss(z, labels, 2.0), [z]),
        ('loss_seesaw', lambda: losses.seesaw_loss(z, labels, state, log_factors=frozen), [z]),
        ('loss_poison_bce', lambda: losses.poison_bce(zp, poison), [zp]),
        ('loss_composite', lambda: losses.composite_loss(model.forward(mlp_params, mlp, emb, feats), targets, composite, state, composite_frozen),
            list(mlp_params.values()))
    ]

def gradcheck_components(seed):
    rng = np.random.default_rng(seed)
    return _gradcheck_ops(rng) + _gradcheck_model(rng, seed)

def gradcheck(seeds=range(10), components=None, max_coords=None):
    '''
    Finite-difference check of every op, both heads and all losses in double precision
    @returns OrderedDict component -> max relative error over the seeds
    '''
    report = OrderedDict()
    for seed in seeds:
        for name, function, params in (components(seed) if components else gradcheck_components(seed)):
            error = T.finite_diff_check(function, params, max_coords=max_coords, seed=seed)
            report[name] = max(report.get(name, 0.0), error)
    for name, error in report.items():
        logger.info('gradcheck %-18s %.3e' % (name, error))
    return report

def gradcheck_failures(report, tolerance=Constants.GRADCHECK_TOLERANCE):
    return [name for name, error in report.items() if not error < tolerance]
