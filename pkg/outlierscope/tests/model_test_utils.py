import json
import logging

import numpy as np
import torch

from outlierscope.model_adapter import ActivationSnapshot
from outlierscope.taps import TapPoint


def make_snapshot(values, slot='x1', layer_index=0, pass_id='pass-0',
                  input_digest='input-0'):
    """Wrap a tokens x channels array-like as an ActivationSnapshot."""
    tensor = torch.as_tensor(np.asarray(values, dtype=np.float32))
    return ActivationSnapshot(TapPoint.of(slot, layer_index), tensor,
                              pass_id, input_digest)


def plant_embedding_ma(model, token=0, channel=2, value=20000.0):
    """Make one embedding entry massive so every pass starts with an MA."""
    embed = model.params['embed_tokens'].clone()
    embed[token, channel] = value
    model.params['embed_tokens'] = embed
    return model


def save_tiny_checkpoint(directory, model_type='gpt2', seed=0):
    """Save a tiny random transformers checkpoint and return the HF model.

    Imported lazily: only the checkpoint round-trip tests need
    `transformers`.
    """
    import transformers

    torch.manual_seed(seed)
    if model_type == 'gpt2':
        config = transformers.GPT2Config(vocab_size=64, n_positions=64,
                                         n_embd=16, n_layer=2, n_head=4)
        model = transformers.GPT2LMHeadModel(config)
    else:
        config = transformers.LlamaConfig(vocab_size=64, hidden_size=16,
                                          intermediate_size=32,
                                          num_hidden_layers=2,
                                          num_attention_heads=4,
                                          num_key_value_heads=2,
                                          max_position_embeddings=64,
                                          tie_word_embeddings=False)
        model = transformers.LlamaForCausalLM(config)
    model.eval()
    model.save_pretrained(directory)
    return model


def write_token_corpus(path, records=4, length=40, vocab_size=64, seed=0):
    """Write a JSON-lines corpus of pre-tokenized `input_ids` records."""
    rng = np.random.default_rng(seed)
    with open(path, 'w') as f:
        for _ in range(records):
            ids = rng.integers(0, vocab_size, size=length).tolist()
            f.write(json.dumps({'input_ids': ids}) + '\n')
    return path


def random_tokens(count, vocab_size=64, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=count).tolist()


class MockLoggingHandler(logging.Handler):
    """Mock logging handler to store and check expected log output.

    Messages are available from an instance's `messages` dict, in order,
    indexed by lowercase log level string (e.g., 'debug', 'info', etc.).
    """

    def __init__(self, *args, **kwargs):
        self.messages = {'debug': [], 'info': [], 'warning': [], 'error': [],
                         'critical': []}
        super(MockLoggingHandler, self).__init__(*args, **kwargs)

    def emit(self, record):
        """Store the log record's formatted message in the messages dict."""
        self.acquire()
        try:
            msg = self.format(record)
            self.messages[record.levelname.lower()].append(msg)
        except Exception:
            self.handleError(record)
        finally:
            self.release()

    def reset(self):
        self.acquire()
        try:
            for msg_list in self.messages.values():
                del msg_list[:]
        finally:
            self.release()