# File formats known to embedhead
# Every format class defines *fingerprints* to recognize its own header

import os

from embedhead.core.common import FormatError


HEADER_BYTES = 16

def registry():
    from embedhead.parsers.emb1 import EmbeddingFile
    from embedhead.parsers.ckpt import CheckpointFile
    from embedhead.parsers.table import MetadataTable
    return [EmbeddingFile, CheckpointFile, MetadataTable]

def detect_format(path):
    '''
    @returns format class able to read the file
    '''
    if not os.path.isfile(path):
        raise FormatError('File not found: %s' % path)
    with open(path, 'rb') as f:
        header = f.read(HEADER_BYTES)
    for cls in registry():
        if cls.fingerprints(header):
            return cls
    raise FormatError('Unrecognized file format: %s' % path)
