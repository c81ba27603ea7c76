# Distribution-matching weighted sampler on top of Vose alias tables

import logging

import numpy as np

from embedhead.core.common import TrainingError


logger = logging.getLogger('embedhead')


class SamplerWeights:
    def __init__(self, class_weights, sample_weights):
        self.class_weights = np.asarray(class_weights, dtype=np.float64)
        self.sample_weights = np.asarray(sample_weights, dtype=np.float64)
        if not len(self.sample_weights) or self.sample_weights.sum() <= 0:
            raise TrainingError('Sampler has nothing to draw from')
        self.prob, self.alias = build_alias_table(self.sample_weights)

    def __len__(self):
        return len(self.sample_weights)

    def probabilities(self):
        '''
        Per-index draw probability read off the alias structure
        '''
        n = len(self.prob)
        out = self.prob.copy()
        np.add.at(out, self.alias, 1.0 - self.prob)
        return out / n


def build_alias_table(weights):
    '''
    Vose's construction: index i keeps itself with probability prob[i], otherwise yields alias[i]
    '''
    weights = np.asarray(weights, dtype=np.float64)
    n = len(weights)
    scaled = weights * n / weights.sum()
    prob = np.ones(n)
    alias = np.arange(n)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s, l = small.pop(), large.pop()
        prob[s] = scaled[s]
        alias[s] = l
        scaled[l] = (scaled[l] + scaled[s]) - 1.0
        if scaled[l] < 1.0:
            small.append(l)
        else:
            large.append(l)
    for i in small + large:
        prob[i] = 1.0
    return prob, alias

def class_sampling_weights(train_freq, target_freq, floor_eps=0.01):
    '''
    w_c = target_c / train_c; classes absent from the target get floor_eps * min positive w,
    classes absent from training get 0
    '''
    train = np.asarray(train_freq, dtype=np.float64)
    target = np.asarray(target_freq, dtype=np.float64)
    if train.shape != target.shape:
        raise TrainingError('Frequency vectors differ in length: %s vs %s' % (len(train), len(target)))
    if not (target > 0).any():
        raise TrainingError('Target class distribution is all zero')
    w = np.zeros_like(train)
    both = (train > 0) & (target > 0)
    if not both.any():
        raise TrainingError('No class is present in both training and target distributions')
    w[both] = target[both] / train[both]
    floor = floor_eps * w[both].min()
    w[(train > 0) & (target <= 0)] = floor
    return w

def compute_sampling_weights(train_freq, target_freq, floor_eps=0.01, labels=None):
    '''
    labels: class of every training sample; without them each index stands for a class
    weighted by its training share
    '''
    w = class_sampling_weights(train_freq, target_freq, floor_eps)
    if labels is None:
        return SamplerWeights(w, np.asarray(train_freq, dtype=np.float64) * w)
    labels = np.asarray(labels, dtype=np.int64)
    return SamplerWeights(w, w[labels])

def draw_epoch_indices(weights, n_draws, seed):
    '''
    n_draws indices with replacement, fully determined by (weights, n_draws, seed)
    '''
    if n_draws < 1:
        raise TrainingError('n_draws must be positive, got %s' % n_draws)
    rng = np.random.default_rng(seed)
    column = rng.integers(0, len(weights), size=n_draws)
    coin = rng.random(n_draws)
    return np.where(coin < weights.prob[column], column, weights.alias[column])

def sampled_class_distribution(indices, labels, n_classes):
    counts = np.bincount(np.asarray(labels, dtype=np.int64)[indices], minlength=n_classes)
    return counts / float(counts.sum())
