# Metadata featurization: one-hot categoricals, cyclical dates, Geohash levels

import math
import bisect

import numpy as np

from embedhead.core.common import FeatureError
from embedhead.core.constants import Constants, Metadata_Columns


BASE32 = Constants.GEOHASH_ALPHABET
CHARMAP = {c: i for i, c in enumerate(BASE32)}
MASKS = [16, 8, 4, 2, 1]

SCHEMA_VERSION = 1


def onehot_encode(value, vocabulary):
    '''
    One slot per vocabulary entry plus a trailing "missing" slot;
    unseen values land in the missing slot as well
    '''
    out = np.zeros(len(vocabulary) + 1)
    if value is not None:
        pos = bisect.bisect_left(vocabulary, value)
        if pos < len(vocabulary) and vocabulary[pos] == value:
            out[pos] = 1.0
            return out
    out[-1] = 1.0
    return out

def cyclical_encode(value, period):
    if period <= 0:
        raise FeatureError('Cyclical period must be positive, got %s' % period)
    phase = 2 * math.pi * (value % period) / period
    return math.sin(phase), math.cos(phase)

def geohash_encode(latitude, longitude, precision=Constants.GEOHASH_PRECISION):
    if not -90 <= latitude <= 90:
        raise FeatureError('Latitude %s outside [-90, 90]' % latitude)
    if not -180 <= longitude <= 180:
        raise FeatureError('Longitude %s outside [-180, 180]' % longitude)
    if not 1 <= precision <= 12:
        raise FeatureError('Geohash precision %s outside [1, 12]' % precision)

    lat_lo, lat_hi = -90.0, 90.0
    lng_lo, lng_hi = -180.0, 180.0
    is_lng, bit, d = True, 0, 0
    code = ''
    while len(code) < precision:
        if is_lng:
            mid = (lng_lo + lng_hi) / 2
            if longitude >= mid:
                d |= MASKS[bit]
                lng_lo = mid
            else:
                lng_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2
            if latitude >= mid:
                d |= MASKS[bit]
                lat_lo = mid
            else:
                lat_hi = mid
        is_lng = not is_lng
        if bit < 4:
            bit += 1
        else:
            code += BASE32[d]
            bit, d = 0, 0
    return code

def geohash_decode(code):
    '''
    @returns cell center latitude, longitude and the half-widths of the cell
    '''
    lat_lo, lat_hi = -90.0, 90.0
    lng_lo, lng_hi = -180.0, 180.0
    is_lng = True
    for c in code:
        if c not in CHARMAP:
            raise FeatureError('Character %r is not in the Geohash alphabet' % c)
        d = CHARMAP[c]
        for mask in MASKS:
            if is_lng:
                mid = (lng_lo + lng_hi) / 2
                if d & mask: lng_lo = mid
                else: lng_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2
                if d & mask: lat_lo = mid
                else: lat_hi = mid
            is_lng = not is_lng
    return (lat_lo + lat_hi) / 2, (lng_lo + lng_hi) / 2, (lat_hi - lat_lo) / 2, (lng_hi - lng_lo) / 2

def geohash_levels_normalize(code, levels=Constants.GEOHASH_LEVELS):
    '''
    Prefix of length k read as a base-32 integer, scaled by 32^k - 1 into [0, 1]
    '''
    if len(code) < max(levels):
        raise FeatureError('Geohash %r shorter than %s characters' % (code, max(levels)))
    out, value = [], 0
    for k in range(1, max(levels) + 1):
        c = code[k - 1]
        if c not in CHARMAP:
            raise FeatureError('Character %r is not in the Geohash alphabet' % c)
        value = value * 32 + CHARMAP[c]
        if k in levels:
            out.append(value / (32**k - 1))
    return out


class MetadataSchema:
    '''
    Fixed column order: categorical one-hots (each with a missing slot),
    then (sin, cos, present) per cyclical field, then Geohash levels 2-5 plus a presence bit
    '''
    def __init__(self, vocabularies, enable_metadata=True, cyclical=True, geohash=True):
        self.enable_metadata = enable_metadata
        self.cyclical = cyclical
        self.geohash = geohash
        self.vocabularies = {}
        for col in Metadata_Columns.categorical:
            vocab = list(vocabularies.get(col, []))
            if vocab != sorted(set(vocab)):
                raise FeatureError('Vocabulary for %s must be sorted and duplicate-free' % col)
            self.vocabularies[col] = vocab
        self.columns = self._columns()

    def _columns(self):
        if not self.enable_metadata:
            return []
        columns = []
        for col in Metadata_Columns.categorical:
            columns += ['%s=%s' % (col, v) for v in self.vocabularies[col]] + ['%s=%s' % (col, Constants.MISSING)]
        if self.cyclical:
            for col in Metadata_Columns.cyclical:
                columns += [col + '_sin', col + '_cos', col + '_present']
        if self.geohash:
            columns += ['geohash_l%d' % k for k in Constants.GEOHASH_LEVELS] + ['location_present']
        return columns

    @property
    def width(self):
        return len(self.columns)

    def todict(self):
        return {
            'version': SCHEMA_VERSION,
            'enable_metadata': self.enable_metadata,
            'cyclical': self.cyclical,
            'geohash': self.geohash,
            'vocabularies': self.vocabularies,
            'columns': self.columns,
            'width': self.width
        }

    @classmethod
    def fromdict(cls, obj):
        if obj.get('version') != SCHEMA_VERSION:
            raise FeatureError('Unsupported metadata schema version: %s' % obj.get('version'))
        schema = cls(obj['vocabularies'], obj['enable_metadata'], obj['cyclical'], obj['geohash'])
        if schema.width != obj['width'] or schema.columns != obj['columns']:
            raise FeatureError('Metadata schema width mismatch: declared %s, rebuilt %s' % (obj['width'], schema.width))
        return schema

def build_schema(train_records, enable_metadata=True, cyclical=True, geohash=True):
    vocabularies = {}
    for col in Metadata_Columns.categorical:
        vocabularies[col] = sorted({r[col] for r in train_records if r[col] is not None})
    return MetadataSchema(vocabularies, enable_metadata, cyclical, geohash)

def encode_metadata(record, schema):
    if not schema.enable_metadata:
        return np.zeros(0)
    parts = []
    for col in Metadata_Columns.categorical:
        parts.append(onehot_encode(record[col], schema.vocabularies[col]))
    if schema.cyclical:
        for col, period in zip(Metadata_Columns.cyclical, (Constants.MONTH_PERIOD, Constants.DAY_PERIOD)):
            if record[col] is None:
                parts.append(np.zeros(3))
            else:
                parts.append(np.array(cyclical_encode(record[col], period) + (1.0,)))
    if schema.geohash:
        if record['latitude'] is None or record['longitude'] is None:
            parts.append(np.zeros(len(Constants.GEOHASH_LEVELS) + 1))
        else:
            code = geohash_encode(record['latitude'], record['longitude'], Constants.GEOHASH_PRECISION)
            parts.append(np.array(geohash_levels_normalize(code) + [1.0]))
    return np.concatenate(parts)

def encode_many(records, schema):
    out = np.zeros((len(records), schema.width))
    if schema.width:
        for n, record in enumerate(records):
            out[n] = encode_metadata(record, schema)
    return out
