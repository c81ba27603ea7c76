# EMB1 embedding container
# magic "EMB1", u32 version, u32 dim, u64 count,
# then count x [u16 id length, UTF-8 id, dim x f32], all little-endian

import struct

import numpy as np

from embedhead.core.common import FormatError


class EmbeddingFile:
    MAGIC = b'EMB1'
    VERSION = 1
    HEADER = struct.Struct('<4sIIQ')
    ID_LEN = struct.Struct('<H')

    @staticmethod
    def fingerprints(header):
        return header[:4] == EmbeddingFile.MAGIC

    @classmethod
    def read(cls, path):
        '''
        @returns (ids list, float32 array of shape (count, dim))
        '''
        with open(path, 'rb') as f:
            raw = f.read()
        if len(raw) < cls.HEADER.size:
            raise FormatError('%s: truncated header' % path)
        magic, version, dim, count = cls.HEADER.unpack_from(raw, 0)
        if magic != cls.MAGIC:
            raise FormatError('%s: bad magic %r, expected %r' % (path, magic, cls.MAGIC))
        if version != cls.VERSION:
            raise FormatError('%s: unsupported version %s, expected %s' % (path, version, cls.VERSION))
        if dim < 1:
            raise FormatError('%s: invalid dimension %s' % (path, dim))

        width, pos = 4 * dim, cls.HEADER.size
        if count * (cls.ID_LEN.size + width) > len(raw) - pos:
            raise FormatError('%s: header declares %s records of dimension %s, file holds only %s bytes' % (path, count, dim, len(raw)))

        ids, vectors = [], np.empty((count, dim), dtype=np.float32)
        for n in range(count):
            try:
                (id_len,) = cls.ID_LEN.unpack_from(raw, pos)
            except struct.error:
                raise FormatError('%s: truncated at record %s of %s' % (path, n, count))
            pos += cls.ID_LEN.size
            end = pos + id_len + width
            if end > len(raw):
                raise FormatError('%s: truncated at record %s of %s' % (path, n, count))
            try:
                ids.append(raw[pos:pos + id_len].decode('utf-8'))
            except UnicodeDecodeError:
                raise FormatError('%s: record %s id is not UTF-8' % (path, n))
            vectors[n] = np.frombuffer(raw, dtype='<f4', count=dim, offset=pos + id_len)
            pos = end
        if pos != len(raw):
            raise FormatError('%s: %s trailing bytes after %s records' % (path, len(raw) - pos, count))
        return ids, vectors

    @classmethod
    def write(cls, path, ids, vectors):
        vectors = np.asarray(vectors, dtype='<f4')
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise FormatError('Embedding matrix shape %s does not match %s ids' % (vectors.shape, len(ids)))
        with open(path, 'wb') as f:
            f.write(cls.HEADER.pack(cls.MAGIC, cls.VERSION, vectors.shape[1], len(ids)))
            for obs_id, vec in zip(ids, vectors):
                encoded = obs_id.encode('utf-8')
                if len(encoded) > 0xFFFF:
                    raise FormatError('Observation id too long: %s...' % obs_id[:32])
                f.write(cls.ID_LEN.pack(len(encoded)))
                f.write(encoded)
                f.write(vec.tobytes())
