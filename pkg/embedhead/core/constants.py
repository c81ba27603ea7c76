# Data bank of constant values


class Constants:
    # Geohash
    GEOHASH_ALPHABET = '0123456789bcdefghjkmnpqrstuvwxyz'
    GEOHASH_PRECISION = 5
    GEOHASH_LEVELS = (2, 3, 4, 5)

    # cyclical periods
    MONTH_PERIOD = 12
    DAY_PERIOD = 31

    # competition cost matrix convention
    COST_POISONOUS_AS_EDIBLE = 100.0
    COST_EDIBLE_AS_POISONOUS = 5.0

    # AdamW
    BETA1 = 0.9
    BETA2 = 0.999
    ADAM_EPS = 1e-8

    LAYER_NORM_EPS = 1e-5
    GRAD_CLIP_NORM = 5.0
    GRADCHECK_TOLERANCE = 1e-4

    UNKNOWN_SPECIES = '__unknown__'
    MISSING = '__missing__'


class Metadata_Columns:
    categorical = ['substrate', 'metasubstrate', 'habitat']
    cyclical = ['month', 'day']
    location = ['latitude', 'longitude']
    taxonomy = ['phylum', 'class', 'order', 'family', 'genus']
    required = ['observation_id', 'species', 'poisonous']
    optional = categorical + cyclical + location + taxonomy
