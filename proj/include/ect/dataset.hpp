#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ect/forward.hpp"
#include "ect/phantom.hpp"

namespace ect {

// One (measurement, ground truth) pair. Values are float32 — the storage and
// training precision — so memory and disk round-trip bit-exactly.
struct Sample {
    std::vector<float> capacitance;  // m*n row-major, normalized, noise-free
    std::vector<float> image;        // img_h*img_w row-major in [0,1]
};

struct DatasetManifest {
    int format_version = 1;
    int count = 0;
    int m = 5;
    int n = 20;
    int img_h = 100;
    int img_w = 200;
    DomainSpec domain_spec;
    PhysicalPermittivity physical;
    PhantomSpec phantom_spec;
    double noise_std = 0.03;
    std::uint64_t seed = 0;
    std::string normalization = "full_empty";
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<Sample> samples;
};

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

// Simulates `count` phantoms with the direct forward path, normalizes against
// the full/empty references, and stores clean float32 pairs. Noise is drawn
// fresh at training time, never baked into the dataset. Sample generation is
// parallel over independent seed streams; results are identical for any
// thread count.
Dataset build_dataset(int count, const PhantomSpec& phantom_spec, const DomainSpec& domain_spec,
                      const PhysicalPermittivity& phys, const NoiseModel& noise,
                      std::uint64_t seed, int threads = 0);

// Deterministic shuffled partition; floor allocation with the remainder going
// to train. Throws InvalidInputError when a part would be empty.
std::array<Dataset, 3> split(const Dataset& dataset, const SplitFractions& fractions,
                             std::uint64_t seed);

// Directory format: manifest.json + samples.bin ("ECTD", u32 version, then
// fixed-size float32 records). Round-trips bit-exactly.
void write_dataset(const Dataset& dataset, const std::string& dir);
Dataset read_dataset(const std::string& dir);

}  // namespace ect
