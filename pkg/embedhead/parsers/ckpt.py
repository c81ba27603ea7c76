# CKPT classifier-head checkpoint
# magic "CKPT", u32 version, u32 blob length, JSON blob,
# then named tensors [u16 name length, name, u8 rank, rank x u32 dims, f32 data] until EOF

import struct
from collections import OrderedDict

import numpy as np
import ujson as json

from embedhead.core.common import FormatError


class CheckpointFile:
    MAGIC = b'CKPT'
    VERSION = 1
    HEADER = struct.Struct('<4sII')

    @staticmethod
    def fingerprints(header):
        return header[:4] == CheckpointFile.MAGIC

    @staticmethod
    def encode_blob(meta):
        return json.dumps(meta, sort_keys=True, escape_forward_slashes=False).encode('utf-8')

    @classmethod
    def write(cls, path, tensors, meta):
        blob = cls.encode_blob(meta)
        with open(path, 'wb') as f:
            f.write(cls.HEADER.pack(cls.MAGIC, cls.VERSION, len(blob)))
            f.write(blob)
            for name, array in tensors.items():
                array = np.asarray(array, dtype='<f4')
                encoded = name.encode('utf-8')
                f.write(struct.pack('<H', len(encoded)))
                f.write(encoded)
                f.write(struct.pack('<B', array.ndim))
                f.write(struct.pack('<%dI' % array.ndim, *array.shape))
                f.write(np.ascontiguousarray(array).tobytes())

    @classmethod
    def read(cls, path):
        '''
        @returns (OrderedDict name -> float32 array, meta dict)
        '''
        with open(path, 'rb') as f:
            raw = f.read()
        if len(raw) < cls.HEADER.size:
            raise FormatError('%s: truncated checkpoint header' % path)
        magic, version, blob_len = cls.HEADER.unpack_from(raw, 0)
        if magic != cls.MAGIC:
            raise FormatError('%s: bad magic %r, expected %r' % (path, magic, cls.MAGIC))
        if version != cls.VERSION:
            raise FormatError('%s: unsupported checkpoint version %s' % (path, version))
        pos = cls.HEADER.size
        if pos + blob_len > len(raw):
            raise FormatError('%s: truncated config blob' % path)
        try:
            meta = json.loads(raw[pos:pos + blob_len].decode('utf-8'))
        except ValueError as e:
            raise FormatError('%s: corrupted config blob: %s' % (path, e))
        pos += blob_len

        tensors = OrderedDict()
        try:
            while pos < len(raw):
                (name_len,) = struct.unpack_from('<H', raw, pos)
                pos += 2
                name = raw[pos:pos + name_len].decode('utf-8')
                pos += name_len
                (rank,) = struct.unpack_from('<B', raw, pos)
                pos += 1
                shape = struct.unpack_from('<%dI' % rank, raw, pos)
                pos += 4 * rank
                count = int(np.prod(shape)) if rank else 1
                if pos + 4 * count > len(raw):
                    raise FormatError('%s: truncated tensor %s' % (path, name))
                tensors[name] = np.frombuffer(raw, dtype='<f4', count=count, offset=pos).reshape(shape).copy()
                pos += 4 * count
        except (struct.error, UnicodeDecodeError):
            raise FormatError('%s: truncated or corrupted tensor section' % path)
        return tensors, meta
