# Metadata table: UTF-8 CSV with a header row, empty cell means missing

import io
import csv

from embedhead.core.common import FormatError
from embedhead.core.constants import Metadata_Columns


class MetadataTable:
    columns = Metadata_Columns.required + Metadata_Columns.optional
    integer_columns = {'month': (1, 12), 'day': (1, 31)}
    float_columns = {'latitude': (-90.0, 90.0), 'longitude': (-180.0, 180.0)}

    @staticmethod
    def fingerprints(header):
        return header.startswith(b'observation_id,')

    @classmethod
    def _convert(cls, row, lineno, path, require_labels=True):
        obs = {}
        for col in cls.columns:
            value = row.get(col, '')
            value = value.strip() if value is not None else ''
            if col in Metadata_Columns.required and (require_labels or col == 'observation_id'):
                if value == '':
                    raise FormatError('%s line %s: required column %s is empty' % (path, lineno, col))
            if value == '':
                obs[col] = None
                continue
            if col == 'poisonous':
                if value not in ('0', '1'):
                    raise FormatError('%s line %s: poisonous must be 0 or 1, got %r' % (path, lineno, value))
                obs[col] = value == '1'
            elif col in cls.integer_columns:
                lo, hi = cls.integer_columns[col]
                try:
                    obs[col] = int(value)
                except ValueError:
                    raise FormatError('%s line %s: %s must be an integer, got %r' % (path, lineno, col, value))
                if not lo <= obs[col] <= hi:
                    raise FormatError('%s line %s: %s=%s outside [%s, %s]' % (path, lineno, col, value, lo, hi))
            elif col in cls.float_columns:
                lo, hi = cls.float_columns[col]
                try:
                    obs[col] = float(value)
                except ValueError:
                    raise FormatError('%s line %s: %s must be a number, got %r' % (path, lineno, col, value))
                if not lo <= obs[col] <= hi:
                    raise FormatError('%s line %s: %s=%s outside [%s, %s]' % (path, lineno, col, value, lo, hi))
            else:
                obs[col] = value
        return obs

    @classmethod
    def read(cls, path, require_labels=True):
        '''
        @returns list of dicts keyed by column name, typed, None for missing;
        unlabelled tables (prediction input) may leave species and poisonous empty
        '''
        try:
            with open(path, newline='', encoding='utf-8') as f:
                text = f.read()
        except UnicodeDecodeError as e:
            raise FormatError('%s: not UTF-8 (byte %s)' % (path, e.start))

        reader = csv.DictReader(io.StringIO(text, newline=''))
        if reader.fieldnames is None:
            raise FormatError('%s: empty metadata table' % path)
        required = Metadata_Columns.required if require_labels else ['observation_id']
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise FormatError('%s: missing required columns %s' % (path, ', '.join(missing)))
        return [cls._convert(row, n, path, require_labels) for n, row in enumerate(reader, 2)]

    @classmethod
    def write(cls, path, rows):
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(cls.columns)
            for row in rows:
                writer.writerow([cls.render(row.get(col)) for col in cls.columns])

    @staticmethod
    def render(value):
        if value is None:
            return ''
        if isinstance(value, bool):
            return '1' if value else '0'
        if isinstance(value, float):
            return repr(value)
        return str(value)
