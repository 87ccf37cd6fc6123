#include "ect/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>

#include <json.hpp>

#include "ect/rng.hpp"
#include "ect/threading.hpp"

namespace ect {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

constexpr char kMagic[4] = {'E', 'C', 'T', 'D'};
constexpr std::uint32_t kVersion = 1;

json domain_to_json(const DomainSpec& s) {
    return json{{"width_um", s.width_um},
                {"depth_um", s.depth_um},
                {"pad_side_um", s.pad_side_um},
                {"pad_top_um", s.pad_top_um},
                {"n_electrodes", s.n_electrodes},
                {"pitch_um", s.pitch_um},
                {"electrode_width_um", s.electrode_width_um},
                {"elements_per_um", s.elements_per_um}};
}

DomainSpec domain_from_json(const json& j) {
    DomainSpec s;
    s.width_um = j.at("width_um");
    s.depth_um = j.at("depth_um");
    s.pad_side_um = j.at("pad_side_um");
    s.pad_top_um = j.at("pad_top_um");
    s.n_electrodes = j.at("n_electrodes");
    s.pitch_um = j.at("pitch_um");
    s.electrode_width_um = j.at("electrode_width_um");
    s.elements_per_um = j.at("elements_per_um");
    return s;
}

json phantom_to_json(const PhantomSpec& s) {
    json j{{"kind", s.kind == PhantomKind::microsphere ? "microsphere" : "biofilm"},
           {"img_h", s.img_h},
           {"img_w", s.img_w}};
    if (s.kind == PhantomKind::microsphere) {
        j["count_min"] = s.count_min;
        j["count_max"] = s.count_max;
        j["radius_min"] = s.radius_min;
        j["radius_max"] = s.radius_max;
        j["depth_min"] = s.depth_min;
        j["depth_max"] = s.depth_max;
    } else {
        j["base_thickness_min"] = s.base_thickness_min;
        j["base_thickness_max"] = s.base_thickness_max;
        j["roughness_amp_min"] = s.roughness_amp_min;
        j["roughness_amp_max"] = s.roughness_amp_max;
        j["corr_length_min"] = s.corr_length_min;
        j["corr_length_max"] = s.corr_length_max;
        j["void_count_max"] = s.void_count_max;
        j["void_radius_min"] = s.void_radius_min;
        j["void_radius_max"] = s.void_radius_max;
    }
    return j;
}

PhantomSpec phantom_from_json(const json& j) {
    PhantomSpec s;
    const std::string kind = j.at("kind");
    if (kind == "microsphere")
        s.kind = PhantomKind::microsphere;
    else if (kind == "biofilm")
        s.kind = PhantomKind::biofilm;
    else
        throw FormatError("unknown phantom kind: " + kind);
    s.img_h = j.at("img_h");
    s.img_w = j.at("img_w");
    if (s.kind == PhantomKind::microsphere) {
        s.count_min = j.at("count_min");
        s.count_max = j.at("count_max");
        s.radius_min = j.at("radius_min");
        s.radius_max = j.at("radius_max");
        s.depth_min = j.at("depth_min");
        s.depth_max = j.at("depth_max");
    } else {
        s.base_thickness_min = j.at("base_thickness_min");
        s.base_thickness_max = j.at("base_thickness_max");
        s.roughness_amp_min = j.at("roughness_amp_min");
        s.roughness_amp_max = j.at("roughness_amp_max");
        s.corr_length_min = j.at("corr_length_min");
        s.corr_length_max = j.at("corr_length_max");
        s.void_count_max = j.at("void_count_max");
        s.void_radius_min = j.at("void_radius_min");
        s.void_radius_max = j.at("void_radius_max");
    }
    return s;
}

std::size_t record_floats(const DatasetManifest& m) {
    return static_cast<std::size_t>(m.m) * m.n + static_cast<std::size_t>(m.img_h) * m.img_w;
}

}  // namespace

Dataset build_dataset(int count, const PhantomSpec& phantom_spec, const DomainSpec& domain_spec,
                      const PhysicalPermittivity& phys, const NoiseModel& noise,
                      std::uint64_t seed, int threads) {
    if (count <= 0) throw InvalidInputError("dataset count must be positive");
    phantom_spec.validate();
    domain_spec.validate();
    phys.validate();
    noise.validate();
    if (phantom_spec.img_h != domain_spec.depth_um || phantom_spec.img_w != domain_spec.width_um)
        throw InvalidSpecError("phantom window must match the domain imaging window");

    ForwardModel model(domain_spec, phys);
    const CapacitanceMatrix& c_empty = model.empty_reference();
    const CapacitanceMatrix& c_full = model.full_reference();

    Dataset ds;
    ds.manifest.count = count;
    ds.manifest.m = 5;
    ds.manifest.n = domain_spec.n_electrodes;
    ds.manifest.img_h = domain_spec.depth_um;
    ds.manifest.img_w = domain_spec.width_um;
    ds.manifest.domain_spec = domain_spec;
    ds.manifest.physical = phys;
    ds.manifest.phantom_spec = phantom_spec;
    ds.manifest.noise_std = noise.std;
    ds.manifest.seed = seed;
    ds.samples.resize(count);

    if (threads > 0) set_thread_count(threads);

    std::mutex err_mutex;
    int err_index = -1;
    std::exception_ptr err;

    parallel_for(count, [&](std::int64_t i) {
        try {
            const PermittivityImage img = gen_phantom(phantom_spec, derive_seed(seed, i));
            const CapacitanceMatrix raw = model.capacitance_direct(img);
            const CapacitanceMatrix norm = normalize(raw, c_empty, c_full);
            Sample& s = ds.samples[i];
            s.capacitance.assign(norm.values.begin(), norm.values.end());
            s.image.assign(img.values().begin(), img.values().end());
        } catch (...) {
            std::lock_guard<std::mutex> lock(err_mutex);
            if (err_index < 0 || i < err_index) {
                err_index = static_cast<int>(i);
                err = std::current_exception();
            }
        }
    });

    if (err) {
        try {
            std::rethrow_exception(err);
        } catch (const std::exception& e) {
            throw GenerationError("sample " + std::to_string(err_index) + ": " + e.what());
        }
    }
    return ds;
}

std::array<Dataset, 3> split(const Dataset& dataset, const SplitFractions& fractions,
                             std::uint64_t seed) {
    const double sum = fractions.train + fractions.val + fractions.test;
    if (std::abs(sum - 1.0) > 1e-9)
        throw InvalidInputError("split fractions must sum to 1");
    const int n = static_cast<int>(dataset.samples.size());
    const int n_train0 = static_cast<int>(std::floor(fractions.train * n));
    const int n_val = static_cast<int>(std::floor(fractions.val * n));
    const int n_test = static_cast<int>(std::floor(fractions.test * n));
    const int n_train = n_train0 + (n - n_train0 - n_val - n_test);
    if (n_train <= 0 || n_val <= 0 || n_test <= 0)
        throw InvalidInputError("dataset too small for the requested split");

    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.uniform_int(0, i));
        std::swap(perm[i], perm[j]);
    }

    auto take = [&](int begin, int len) {
        Dataset part;
        part.manifest = dataset.manifest;
        part.manifest.count = len;
        part.samples.reserve(len);
        for (int k = begin; k < begin + len; ++k)
            part.samples.push_back(dataset.samples[perm[k]]);
        return part;
    };
    return {take(0, n_train), take(n_train, n_val), take(n_train + n_val, n_test)};
}

void write_dataset(const Dataset& dataset, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    const DatasetManifest& m = dataset.manifest;
    if (m.count != static_cast<int>(dataset.samples.size()))
        throw InvalidInputError("manifest count does not match sample count");

    json j{{"format_version", m.format_version},
           {"count", m.count},
           {"m", m.m},
           {"n", m.n},
           {"img_h", m.img_h},
           {"img_w", m.img_w},
           {"domain_spec", domain_to_json(m.domain_spec)},
           {"physical",
            {{"eps_background", m.physical.eps_background},
             {"eps_inclusion", m.physical.eps_inclusion}}},
           {"phantom_spec", phantom_to_json(m.phantom_spec)},
           {"noise_std", m.noise_std},
           {"seed", m.seed},
           {"normalization", m.normalization}};
    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw FormatError("cannot write manifest in " + dir);
    mf << j.dump(2) << "\n";

    std::ofstream bf(fs::path(dir) / "samples.bin", std::ios::binary);
    if (!bf) throw FormatError("cannot write samples.bin in " + dir);
    bf.write(kMagic, 4);
    bf.write(reinterpret_cast<const char*>(&kVersion), 4);
    const std::size_t cap_n = static_cast<std::size_t>(m.m) * m.n;
    const std::size_t img_n = static_cast<std::size_t>(m.img_h) * m.img_w;
    for (const Sample& s : dataset.samples) {
        if (s.capacitance.size() != cap_n || s.image.size() != img_n)
            throw InvalidInputError("sample dimensions do not match the manifest");
        bf.write(reinterpret_cast<const char*>(s.capacitance.data()), cap_n * sizeof(float));
        bf.write(reinterpret_cast<const char*>(s.image.data()), img_n * sizeof(float));
    }
    if (!bf) throw FormatError("write failed for samples.bin in " + dir);
}

Dataset read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw FormatError("missing manifest.json in " + dir);
    json j;
    try {
        mf >> j;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed manifest.json: ") + e.what());
    }

    Dataset ds;
    DatasetManifest& m = ds.manifest;
    try {
        m.format_version = j.at("format_version");
        if (m.format_version != 1)
            throw FormatError("unsupported dataset format_version " +
                              std::to_string(m.format_version));
        m.count = j.at("count");
        m.m = j.at("m");
        m.n = j.at("n");
        m.img_h = j.at("img_h");
        m.img_w = j.at("img_w");
        m.domain_spec = domain_from_json(j.at("domain_spec"));
        m.physical.eps_background = j.at("physical").at("eps_background");
        m.physical.eps_inclusion = j.at("physical").at("eps_inclusion");
        m.phantom_spec = phantom_from_json(j.at("phantom_spec"));
        m.noise_std = j.at("noise_std");
        m.seed = j.at("seed");
        m.normalization = j.at("normalization");
    } catch (const json::exception& e) {
        throw FormatError(std::string("manifest.json missing fields: ") + e.what());
    }

    const fs::path bin_path = fs::path(dir) / "samples.bin";
    std::ifstream bf(bin_path, std::ios::binary);
    if (!bf) throw FormatError("missing samples.bin in " + dir);

    char magic[4];
    bf.read(magic, 4);
    if (!bf || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad magic in samples.bin", 0);
    std::uint32_t version = 0;
    bf.read(reinterpret_cast<char*>(&version), 4);
    if (!bf || version != kVersion) throw FormatError("unsupported samples.bin version", 4);

    const std::size_t rec_bytes = record_floats(m) * sizeof(float);
    const std::uintmax_t file_size = fs::file_size(bin_path);
    const std::uintmax_t expect = 8 + static_cast<std::uintmax_t>(m.count) * rec_bytes;
    if (file_size != expect)
        throw FormatError("samples.bin size does not match manifest count",
                          static_cast<std::size_t>(std::min(file_size, expect)));

    const std::size_t cap_n = static_cast<std::size_t>(m.m) * m.n;
    const std::size_t img_n = static_cast<std::size_t>(m.img_h) * m.img_w;
    ds.samples.resize(m.count);
    std::size_t offset = 8;
    for (int i = 0; i < m.count; ++i) {
        Sample& s = ds.samples[i];
        s.capacitance.resize(cap_n);
        s.image.resize(img_n);
        bf.read(reinterpret_cast<char*>(s.capacitance.data()), cap_n * sizeof(float));
        bf.read(reinterpret_cast<char*>(s.image.data()), img_n * sizeof(float));
        if (!bf) throw FormatError("truncated samples.bin record", offset);
        offset += rec_bytes;
    }
    return ds;
}

}  // namespace ect
