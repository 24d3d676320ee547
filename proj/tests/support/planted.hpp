#pragma once

// Synthetic models with hand-built neurons of known function. Each builder
// returns the model together with the refs a test should recover.

#include "neuron_probe/corpus.hpp"
#include "neuron_probe/model.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace planted {

using neuron_probe::Corpus;
using neuron_probe::HeadRef;
using neuron_probe::Model;
using neuron_probe::NeuronRef;

/// B = d toy: identity unembedding, no final norm, everything else zero.
Model identity_toy(int d);

/// Sets a tensor element (row-major) on a model's copy-on-write storage.
void set(neuron_probe::Tensor& t, std::size_t r, std::size_t c, float v);
void set(neuron_probe::Tensor& t, std::size_t i, float v);

/// Layer-1 FFN with one neuron writing along e_answer under a forced-high
/// coefficient, a norm decoy (huge subvalue along the all-ones direction) and
/// a coefficient decoy (huge coefficient, tiny all-ones subvalue).
struct ValueModel {
    Model model;
    int answer = 3;
    NeuronRef planted;
    NeuronRef norm_decoy;
    NeuronRef coeff_decoy;
    Corpus corpus;
};
ValueModel value_model(std::uint64_t seed);

/// A layer-0 FFN neuron writing along the subkey of a layer-1 value neuron.
/// `attention` selects an attention value neuron (row of wv) instead of an FFN
/// one (row of fc1).
struct QueryModel {
    Model model;
    NeuronRef value;
    NeuronRef query;
    Corpus corpus;
};
QueryModel query_model(std::uint64_t seed, bool attention);

/// Wide two-layer model: four trigger tokens each switch on a group of 50
/// layer-0 FFN neurons; the group writes along the subkey of one layer-1
/// attention neuron that in turn writes the trigger's answer. 8192 FFN neurons
/// per layer, so a 1000-neuron query budget fits the inventory.
struct WideQueryModel {
    Model model;
    std::vector<std::vector<NeuronRef>> groups; // by channel
    std::vector<int> answers;                   // by channel
    Corpus corpus;
};
WideQueryModel wide_query_model(std::uint64_t seed);

/// Three knowledge types; layer-1 head t alone copies type-t subject codes to
/// their answers, so every type's knowledge lives in one distinct head.
struct HeadModel {
    Model model;
    std::map<std::string, Corpus> by_type;
    std::map<std::string, HeadRef> head;
};
HeadModel head_model(std::uint64_t seed);

/// Bundled tiny model data directory.
std::filesystem::path data_dir();

} // namespace planted
