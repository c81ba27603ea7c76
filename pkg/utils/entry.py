#!/usr/bin/env python
'''
Entry junction

embedhead trains, ensembles and evaluates lightweight classifier heads
over precomputed image embeddings; see "embedhead --help"
'''
import os, sys

sys.path.insert(0, os.path.realpath(os.path.dirname(os.path.abspath(__file__)) + '/../'))

from embedhead.cli import main


if __name__ == "__main__":
    sys.exit(main())
