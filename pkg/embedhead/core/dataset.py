# Observation pools: ingestion, class catalog, stratified splits, folds and synthetic data

import os
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from embedhead.core.common import DatasetError, FormatError, stable_hash, read_json, write_json
from embedhead.core.constants import Constants, Metadata_Columns
from embedhead.core.settings import thread_count
from embedhead.core import features
from embedhead.parsers.emb1 import EmbeddingFile
from embedhead.parsers.table import MetadataTable


logger = logging.getLogger('embedhead')

MANIFEST_VERSION = 1
N_SECTIONS = 3


class ObservationRecord:
    __slots__ = ['observation_id', 'embedding', 'species', 'poisonous'] + Metadata_Columns.optional

    def __init__(self, observation_id, embedding, species, poisonous=False, **metadata):
        self.observation_id = observation_id
        self.embedding = embedding
        self.species = species
        self.poisonous = bool(poisonous)
        for col in Metadata_Columns.optional:
            setattr(self, col, metadata.pop(col, None))
        if metadata:
            raise DatasetError('Unknown record fields: %s' % ', '.join(sorted(metadata)))

    def __getitem__(self, key):
        return getattr(self, key)

    def __repr__(self):
        return '<ObservationRecord %s %s>' % (self.observation_id, self.species)

    @property
    def taxonomy(self):
        return {rank: getattr(self, rank) for rank in Metadata_Columns.taxonomy if getattr(self, rank) is not None}

    def metadata_row(self):
        row = {'observation_id': self.observation_id, 'species': self.species, 'poisonous': self.poisonous}
        for col in Metadata_Columns.optional:
            row[col] = getattr(self, col)
        return row


class DatasetManifest:
    '''
    JSON document naming, per pool, the EMB1 and CSV files and their record count;
    paths are relative to the manifest location
    '''
    def __init__(self, dim, pools, base_dir='.', schema_version=MANIFEST_VERSION):
        self.dim = dim
        self.pools = pools
        self.base_dir = base_dir
        self.schema_version = schema_version

    @classmethod
    def load(cls, path):
        if not os.path.isfile(path):
            raise DatasetError('Manifest not found: %s' % path)
        obj = read_json(path)
        for key in ('schema_version', 'dim', 'pools'):
            if key not in obj:
                raise FormatError('%s: manifest lacks "%s"' % (path, key))
        if obj['schema_version'] != MANIFEST_VERSION:
            raise FormatError('%s: unsupported manifest version %s' % (path, obj['schema_version']))
        for name, pool in obj['pools'].items():
            for key in ('embeddings', 'metadata', 'count'):
                if key not in pool:
                    raise FormatError('%s: pool %s lacks "%s"' % (path, name, key))
        return cls(obj['dim'], obj['pools'], os.path.dirname(os.path.abspath(path)), obj['schema_version'])

    def save(self, path):
        write_json(path, self.todict())

    def todict(self):
        return {'schema_version': self.schema_version, 'dim': self.dim, 'pools': self.pools}

    def resolve(self, relpath):
        return relpath if os.path.isabs(relpath) else os.path.join(self.base_dir, relpath)

    @property
    def count(self):
        return sum(pool['count'] for pool in self.pools.values())


def _read_pool_files(manifest, pool, require_labels):
    paths = [(EmbeddingFile, manifest.resolve(p)) for p in pool['embeddings']] + \
            [(MetadataTable, manifest.resolve(p)) for p in pool['metadata']]
    for _, path in paths:
        if not os.path.isfile(path):
            raise DatasetError('File listed in manifest not found: %s' % path)

    def read(item):
        cls, path = item
        if cls is MetadataTable:
            return cls.read(path, require_labels=require_labels)
        return cls.read(path)

    with ThreadPoolExecutor(max_workers=thread_count()) as pool_exec:
        results = list(pool_exec.map(read, paths))
    n_emb = len(pool['embeddings'])
    return results[:n_emb], results[n_emb:]

def load_dataset(manifest, pool=None, require_labels=True):
    '''
    Joins embeddings and metadata rows on observation_id
    @returns list of ObservationRecord in metadata order
    '''
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    if pool is None:
        if len(manifest.pools) != 1:
            raise DatasetError('Manifest holds pools %s, name one' % ', '.join(sorted(manifest.pools)))
        pool = list(manifest.pools)[0]
    if pool not in manifest.pools:
        raise DatasetError('Pool %s not in manifest (has %s)' % (pool, ', '.join(sorted(manifest.pools))))
    entry = manifest.pools[pool]

    emb_parts, meta_parts = _read_pool_files(manifest, entry, require_labels)
    vectors = {}
    for ids, matrix in emb_parts:
        if matrix.shape[1] != manifest.dim:
            raise DatasetError('Embedding dimension mismatch: expected %s, actual %s' % (manifest.dim, matrix.shape[1]))
        bad = ~np.isfinite(matrix).all(axis=1)
        if bad.any():
            raise DatasetError('Non-finite embedding value in record %s' % ids[int(np.argmax(bad))])
        for n, obs_id in enumerate(ids):
            if obs_id in vectors:
                raise DatasetError('Duplicate observation id in embeddings: %s' % obs_id)
            vectors[obs_id] = matrix[n]

    records, seen = [], set()
    for rows in meta_parts:
        for row in rows:
            obs_id = row.pop('observation_id')
            if obs_id not in vectors:
                raise DatasetError('Metadata row has no matching embedding: %s' % obs_id)
            if obs_id in seen:
                raise DatasetError('Duplicate observation id in metadata: %s' % obs_id)
            seen.add(obs_id)
            species, poisonous = row.pop('species'), row.pop('poisonous')
            records.append(ObservationRecord(obs_id, vectors[obs_id], species, bool(poisonous), **row))

    orphans = [i for i in vectors if i not in seen]
    if orphans:
        raise DatasetError('Embedding without metadata row: %s' % orphans[0])
    if len(records) != entry['count']:
        raise DatasetError('Pool %s declares %s records, files hold %s' % (pool, entry['count'], len(records)))
    logger.info('Loaded %s records of dimension %s from pool %s' % (len(records), manifest.dim, pool))
    return records

def write_dataset(pools, out_dir, dim, name='dataset'):
    '''
    Writes every pool as <name>_<pool>.emb + <name>_<pool>.csv and a manifest
    @returns (DatasetManifest, manifest path)
    '''
    os.makedirs(out_dir, exist_ok=True)
    listing = OrderedDict()
    for pool, records in pools.items():
        emb_name, csv_name = '%s_%s.emb' % (name, pool), '%s_%s.csv' % (name, pool)
        EmbeddingFile.write(os.path.join(out_dir, emb_name),
            [r.observation_id for r in records],
            np.array([r.embedding for r in records], dtype=np.float32).reshape(len(records), dim))
        MetadataTable.write(os.path.join(out_dir, csv_name), [r.metadata_row() for r in records])
        listing[pool] = {'embeddings': [emb_name], 'metadata': [csv_name], 'count': len(records)}
    manifest = DatasetManifest(dim, listing, out_dir)
    path = os.path.join(out_dir, name + '.json')
    manifest.save(path)
    return manifest, path


def class_frequencies(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if not len(labels):
        return np.zeros(n_classes)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    return counts / counts.sum()


class ClassCatalog:
    def __init__(self, species_names, poison_map, taxonomy_maps, train_freq, target_freq, train_counts=None):
        self.species_names = list(species_names)
        self.index_of = {name: n for n, name in enumerate(self.species_names)}
        self.unknown_index = len(self.species_names) - 1
        self.poison_map = np.asarray(poison_map, dtype=bool)
        self.taxonomy_maps = taxonomy_maps  # rank -> {'labels': [...], 'index': [per-class label index or -1]}
        self.train_freq = np.asarray(train_freq, dtype=np.float64)
        self.target_freq = np.asarray(target_freq, dtype=np.float64)
        self.train_counts = np.asarray(train_counts if train_counts is not None else np.zeros(len(self.species_names)), dtype=np.int64)

    @property
    def n_classes(self):
        return len(self.species_names)

    def relabel(self, species):
        '''
        Species name or catalog index -> catalog index;
        anything not seen in training becomes the unknown class
        '''
        if isinstance(species, (int, np.integer)) and not isinstance(species, bool):
            if not 0 <= species < self.n_classes:
                raise DatasetError('Class index %s outside catalog of %s classes' % (species, self.n_classes))
            return int(species)
        return self.index_of.get(species, self.unknown_index)

    def taxonomy_targets(self, rank, class_indices):
        index = np.asarray(self.taxonomy_maps[rank]['index'], dtype=np.int64)
        return index[np.asarray(class_indices, dtype=np.int64)]

    def todict(self):
        return {
            'species_names': self.species_names,
            'unknown_index': self.unknown_index,
            'poison_map': [bool(x) for x in self.poison_map],
            'taxonomy_maps': self.taxonomy_maps,
            'train_freq': self.train_freq.tolist(),
            'target_freq': self.target_freq.tolist(),
            'train_counts': self.train_counts.tolist()
        }

    @classmethod
    def fromdict(cls, obj):
        catalog = cls(obj['species_names'], obj['poison_map'], obj['taxonomy_maps'], obj['train_freq'], obj['target_freq'], obj.get('train_counts'))
        if catalog.unknown_index != obj['unknown_index']:
            raise DatasetError('Catalog unknown index mismatch')
        return catalog

def build_class_catalog(train_records, val_records):
    if not train_records:
        raise DatasetError('Cannot build a class catalog from an empty training set')
    for r in list(train_records) + list(val_records):
        if not r.species:
            raise DatasetError('Record %s has an empty species field' % r.observation_id)

    names = sorted({r.species for r in train_records})
    if Constants.UNKNOWN_SPECIES in names:
        raise DatasetError('Species name %s is reserved' % Constants.UNKNOWN_SPECIES)
    names.append(Constants.UNKNOWN_SPECIES)
    index_of = {name: n for n, name in enumerate(names)}
    n_classes = len(names)

    poison_map = [False] * n_classes
    for r in train_records:
        if r.poisonous:
            poison_map[index_of[r.species]] = True

    taxonomy_maps = {}
    for rank in Metadata_Columns.taxonomy:
        per_class = {}
        for r in train_records:
            if r[rank] is not None and index_of[r.species] not in per_class:
                per_class[index_of[r.species]] = r[rank]
        if not per_class:
            continue
        labels = sorted(set(per_class.values()))
        lookup = {label: n for n, label in enumerate(labels)}
        taxonomy_maps[rank] = {
            'labels': labels,
            'index': [lookup[per_class[c]] if c in per_class else -1 for c in range(n_classes)]
        }

    train_labels = [index_of[r.species] for r in train_records]
    val_labels = [index_of.get(r.species, n_classes - 1) for r in val_records]
    return ClassCatalog(names, poison_map, taxonomy_maps,
        class_frequencies(train_labels, n_classes),
        class_frequencies(val_labels, n_classes),
        np.bincount(train_labels, minlength=n_classes))


class SplitAssignment:
    '''
    Three disjoint sections of the validation pool;
    the last section is the held-out test slice, the first two swap roles across folds
    '''
    FOLD_LAYOUT = [
        {'train_extension': 0, 'validation': 1, 'test': 2},
        {'train_extension': 1, 'validation': 0, 'test': 2}
    ]

    def __init__(self, section_of, seed, fold_layout=None):
        self.section_of = section_of
        self.seed = seed
        self.fold_layout = fold_layout or [dict(f) for f in self.FOLD_LAYOUT]

    def sizes(self):
        sizes = [0] * N_SECTIONS
        for s in self.section_of.values():
            sizes[s] += 1
        return sizes

    def todict(self):
        return {'seed': self.seed, 'fold_layout': self.fold_layout, 'section_of': self.section_of}

    @classmethod
    def fromdict(cls, obj):
        return cls({k: int(v) for k, v in obj['section_of'].items()}, obj['seed'], obj['fold_layout'])

def stratified_three_way_split(val_records, seed):
    if not val_records:
        raise DatasetError('Cannot split an empty validation pool')
    by_species = {}
    for r in val_records:
        by_species.setdefault(r.species, []).append(r.observation_id)

    section_of = {}
    for species in sorted(by_species):
        ids = sorted(by_species[species])
        rng = np.random.default_rng(stable_hash('%d:split:%s' % (seed, species)))
        order = rng.permutation(len(ids))
        offset = stable_hash('%d:offset:%s' % (seed, species)) % N_SECTIONS
        for k, n in enumerate(order):
            section_of[ids[n]] = (offset + k) % N_SECTIONS
    split = SplitAssignment(section_of, seed)
    logger.info('Validation pool split into sections of %s' % split.sizes())
    return split

def assemble_fold(train_records, val_records, split, fold):
    if fold not in (0, 1):
        raise DatasetError('Invalid fold index %s, expected 0 or 1' % fold)
    layout = split.fold_layout[fold]
    sections = [[] for _ in range(N_SECTIONS)]
    for r in val_records:
        if r.observation_id not in split.section_of:
            raise DatasetError('Record %s is not covered by the split' % r.observation_id)
        sections[split.section_of[r.observation_id]].append(r)
    train_set = list(train_records) + sections[layout['train_extension']]
    return train_set, sections[layout['validation']], sections[layout['test']]

def stratified_subsample(records, fraction, seed):
    '''
    Smaller exploratory development set: keeps round(n * fraction) records per species, at least one
    '''
    if fraction >= 1:
        return list(records)
    by_species = {}
    for r in records:
        by_species.setdefault(r.species, []).append(r)
    keep = set()
    for species in sorted(by_species):
        group = sorted(by_species[species], key=lambda r: r.observation_id)
        rng = np.random.default_rng(stable_hash('%d:dev:%s' % (seed, species)))
        k = max(1, int(round(len(group) * fraction)))
        keep.update(group[n].observation_id for n in rng.permutation(len(group))[:k])
    return [r for r in records if r.observation_id in keep]


class Slice:
    '''
    Array view of a record set in catalog space; every gather is counted
    so that held-out data access can be audited
    '''
    def __init__(self, records, catalog, schema, name=''):
        self.name = name
        self.ids = [r.observation_id for r in records]
        dim = len(records[0].embedding) if records else 0
        self.embeddings = np.array([r.embedding for r in records], dtype=np.float64).reshape(len(records), dim)
        self.features = features.encode_many(records, schema)
        self.labels = np.array([catalog.relabel(r.species) for r in records], dtype=np.int64)
        self.poison = np.array([catalog.poison_map[l] for l in self.labels], dtype=np.float64)
        self.taxonomy = {rank: catalog.taxonomy_targets(rank, self.labels) for rank in catalog.taxonomy_maps}
        self.reads = 0

    def __len__(self):
        return len(self.ids)

    def gather(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        self.reads += len(indices)
        return {
            'embeddings': self.embeddings[indices],
            'features': self.features[indices],
            'labels': self.labels[indices],
            'poison': self.poison[indices],
            'taxonomy': {rank: t[indices] for rank, t in self.taxonomy.items()}
        }

    def everything(self):
        return self.gather(np.arange(len(self)))


def _allocate(total, weights, minimum):
    '''
    Largest-remainder allocation of total over weights, each share at least minimum
    '''
    weights = np.asarray(weights, dtype=np.float64)
    base = minimum * len(weights)
    if total < base:
        base, minimum = 0, 0
    share = (total - base) * weights / weights.sum()
    counts = np.floor(share).astype(np.int64)
    remainder = total - base - counts.sum()
    order = sorted(range(len(weights)), key=lambda c: (-(share[c] - counts[c]), c))
    for c in order[:remainder]:
        counts[c] += 1
    return counts + minimum

SUBSTRATES = ['bark', 'dead wood', 'fallen leaves', 'moss', 'soil', 'wood chips']
METASUBSTRATES = ['litter', 'soil', 'stone', 'wood']
HABITATS = ['bog', 'coniferous woodland', 'deciduous woodland', 'garden', 'heath', 'park']

def _synthetic_metadata(rng, c):
    meta = {}
    meta['substrate'] = SUBSTRATES[int(rng.integers(len(SUBSTRATES)))]
    meta['metasubstrate'] = METASUBSTRATES[int(rng.integers(len(METASUBSTRATES)))]
    if rng.random() < 0.6:
        meta['habitat'] = HABITATS[c % len(HABITATS)]
    else:
        meta['habitat'] = HABITATS[int(rng.integers(len(HABITATS)))]
    meta['month'] = int(rng.integers(1, 13))
    meta['day'] = int(rng.integers(1, 32))
    meta['latitude'] = round(float(rng.uniform(54.5, 57.8)), 5)
    meta['longitude'] = round(float(rng.uniform(8.0, 12.7)), 5)
    for group in (['substrate'], ['metasubstrate'], ['habitat'], ['month'], ['day'], ['latitude', 'longitude']):
        if rng.random() < 0.05:
            for col in group:
                meta[col] = None
    meta['phylum'] = 'Ascomycota' if c % 3 == 0 else 'Basidiomycota'
    meta['class'] = 'C%02d' % (c // 5)
    meta['order'] = 'O%02d' % (c // 4)
    meta['family'] = 'F%02d' % (c // 3)
    meta['genus'] = 'G%02d' % (c // 2)
    return meta

def make_synthetic(n_classes, dim, n_samples, imbalance_exponent=1.0, poison_fraction=0.3, seed=0,
                   separation=4.0, val_fraction=0.15, n_unknown_species=1):
    '''
    Desk-scale stand-in for a long-tailed species pool:
    Gaussian clusters of RMS radius 1 whose means are pairwise *separation* apart.
    Separation is in units of the cluster radius, not of the per-coordinate spread:
    each coordinate has standard deviation 1/sqrt(dim), so along the line joining two
    means the clusters sit separation * sqrt(dim) standard deviations apart
    @returns (train_records, val_records)
    '''
    if n_classes < 2 or dim < 2:
        raise DatasetError('Synthetic data needs n_classes >= 2 and dim >= 2')
    if n_samples < n_classes:
        raise DatasetError('n_samples=%s is smaller than n_classes=%s' % (n_samples, n_classes))
    rng = np.random.default_rng(seed)
    n_species = n_classes + n_unknown_species

    if dim >= n_species:
        basis, _ = np.linalg.qr(rng.standard_normal((dim, n_species)))
        means = basis.T * (separation / np.sqrt(2))
    else:
        means = rng.standard_normal((n_species, dim))
        means *= (separation / np.sqrt(2)) / np.linalg.norm(means, axis=1, keepdims=True)
    noise = 1.0 / np.sqrt(dim)

    n_val = int(round(n_samples * val_fraction))
    n_train = n_samples - n_val
    weights = (np.arange(n_classes) + 1.0) ** (-imbalance_exponent)
    train_counts = _allocate(n_train, weights, 1)

    perm = rng.permutation(n_classes)
    val_weights = np.concatenate([weights[perm], np.full(n_unknown_species, weights.min())])
    val_counts = _allocate(n_val, val_weights, 1)

    n_poison = int(round(poison_fraction * n_classes))
    poisonous = set(int(c) for c in rng.choice(n_classes, size=n_poison, replace=False)) if n_poison else set()

    def draw(counts, prefix):
        out = []
        for c, count in enumerate(counts):
            vectors = means[c] + noise * rng.standard_normal((int(count), dim))
            for vec in vectors:
                out.append((c, vec.astype(np.float32), _synthetic_metadata(rng, c)))
        order = rng.permutation(len(out))
        return [ObservationRecord('%s%06d' % (prefix, n), out[k][1], 'sp%03d' % out[k][0],
            out[k][0] in poisonous, **out[k][2]) for n, k in enumerate(order)]

    train_records = draw(train_counts, 'tr')
    val_records = draw(val_counts, 'va')
    logger.info('Synthesized %s training and %s validation records over %s species' % (len(train_records), len(val_records), n_species))
    return train_records, val_records
