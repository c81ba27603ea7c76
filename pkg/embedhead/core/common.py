# Includable routines and the error hierarchy

import csv
import hashlib
import logging

import ujson as json


logger = logging.getLogger('embedhead')
logger.addHandler(logging.NullHandler())


class EmbedheadError(Exception):
    def __init__(self, value):
        super(EmbedheadError, self).__init__(value)
        self.value = value

    def __str__(self):
        return str(self.value)

class SettingsError(EmbedheadError): pass

class DatasetError(EmbedheadError): pass

class FormatError(DatasetError): pass

class FeatureError(EmbedheadError): pass

class TensorError(EmbedheadError): pass

class ModelError(EmbedheadError): pass

class LossError(EmbedheadError): pass

class TrainingError(EmbedheadError): pass

class MetricError(EmbedheadError): pass


def hrsize(num):
    for x in ['bytes', 'KB', 'MB', 'GB']:
        if num < 1024.0:
            return "%3.1f%s" % (num, x)
        num /= 1024.0
    return "%3.1f%s" % (num, 'TB')

def stable_hash(text):
    '''
    Platform-independent integer hash (Python's hash() is salted per process)
    '''
    return int(hashlib.sha256(text.encode('utf-8')).hexdigest()[:16], 16)

def read_json(path):
    try:
        with open(path) as f:
            return json.loads(f.read())
    except ValueError as e:
        raise FormatError('%s is not valid JSON: %s' % (path, e))

def write_json(path, obj):
    with open(path, 'w') as f:
        f.write(json.dumps(obj, indent=4, sort_keys=True, escape_forward_slashes=False))
        f.write("\n")

def write_csv(path, header, rows):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)

def fmt_float(x, digits=6):
    return "%.*f" % (digits, x)
