#include "blockpipe/error.hpp"
#include "blockpipe/json_io.hpp"
#include "blockpipe/model.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace blockpipe {

namespace {

constexpr const char* kFormat = "blockpipe-checkpoint";
constexpr int kVersion = 1;

void write_f64_le(std::ofstream& os, std::span<const double> values) {
    for (double v : values) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        unsigned char bytes[8];
        for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
        os.write(reinterpret_cast<const char*>(bytes), 8);
    }
}

void read_f64_le(std::ifstream& is, std::span<double> values) {
    for (double& v : values) {
        unsigned char bytes[8];
        is.read(reinterpret_cast<char*>(bytes), 8);
        require(static_cast<bool>(is), ErrorKind::Config, "checkpoint: blob is truncated");
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
        v = std::bit_cast<double>(bits);
    }
}

} // namespace

void save_checkpoint(const ModelBundle& bundle, const std::string& stem) {
    nlohmann::json manifest;
    manifest["format"] = kFormat;
    manifest["version"] = kVersion;
    manifest["config"] = bundle.weights.config;
    manifest["training_step"] = bundle.training_step;
    manifest["has_adapters"] = bundle.adapters.has_value();
    manifest["adapter_rank"] = bundle.adapters ? bundle.adapters->rank : 0;
    manifest["blob"] = std::filesystem::path(stem + ".bin").filename().string();

    auto tensors = nlohmann::json::array();
    std::size_t offset = 0;
    auto describe = [&](const std::string& name, const RealMatrix& m) {
        tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
        offset += m.size();
    };
    bundle.weights.for_each(describe);
    if (bundle.adapters) bundle.adapters->for_each(describe);
    manifest["tensors"] = tensors;
    manifest["total_values"] = offset;

    std::ofstream blob(stem + ".bin", std::ios::binary);
    require(static_cast<bool>(blob), ErrorKind::Config, "checkpoint: cannot write " + stem + ".bin");
    auto dump = [&](const std::string&, const RealMatrix& m) { write_f64_le(blob, m.values()); };
    bundle.weights.for_each(dump);
    if (bundle.adapters) bundle.adapters->for_each(dump);
    require(static_cast<bool>(blob), ErrorKind::Config, "checkpoint: write failed for " + stem + ".bin");

    std::ofstream js(stem + ".json");
    require(static_cast<bool>(js), ErrorKind::Config, "checkpoint: cannot write " + stem + ".json");
    js << manifest.dump(2) << '\n';
}

ModelBundle load_checkpoint(const std::string& stem) {
    std::ifstream js(stem + ".json");
    require(static_cast<bool>(js), ErrorKind::Config, "checkpoint: cannot open " + stem + ".json");
    nlohmann::json manifest;
    try {
        js >> manifest;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Config, std::string("checkpoint: malformed manifest: ") + e.what());
    }
    require(manifest.value("format", "") == kFormat, ErrorKind::Config, "checkpoint: unknown format");
    require(manifest.value("version", 0) == kVersion, ErrorKind::Config, "checkpoint: unsupported version");

    ModelBundle bundle;
    const ModelConfig cfg = manifest.at("config").get<ModelConfig>();
    bundle.weights = init_weights(cfg, 0);
    bundle.training_step = manifest.value("training_step", std::int64_t{0});
    if (manifest.value("has_adapters", false)) {
        ModelConfig acfg = cfg;
        acfg.adapter_rank = manifest.at("adapter_rank").get<int>();
        bundle.adapters = init_adapters(acfg, 0);
        require(bundle.adapters.has_value(), ErrorKind::Config, "checkpoint: adapters flagged with rank 0");
    }

    const auto& tensors = manifest.at("tensors");
    std::size_t index = 0;
    auto check = [&](const std::string& name, const RealMatrix& m) {
        require(index < tensors.size(), ErrorKind::Config, "checkpoint: manifest lists too few tensors");
        const auto& t = tensors[index++];
        require(t.at("name").get<std::string>() == name, ErrorKind::Config,
                "checkpoint: expected tensor " + name + ", found " + t.at("name").get<std::string>());
        require(t.at("shape")[0].get<std::size_t>() == m.rows() && t.at("shape")[1].get<std::size_t>() == m.cols(),
                ErrorKind::Config, "checkpoint: shape mismatch for " + name);
    };
    bundle.weights.for_each(check);
    if (bundle.adapters) bundle.adapters->for_each(check);
    require(index == tensors.size(), ErrorKind::Config, "checkpoint: manifest lists unexpected tensors");

    const std::filesystem::path blob_path =
        std::filesystem::path(stem).parent_path() / manifest.value("blob", std::filesystem::path(stem + ".bin").filename().string());
    std::ifstream blob(blob_path, std::ios::binary);
    require(static_cast<bool>(blob), ErrorKind::Config, "checkpoint: cannot open " + blob_path.string());
    auto load = [&](const std::string&, RealMatrix& m) { read_f64_le(blob, m.values()); };
    bundle.weights.for_each(load);
    if (bundle.adapters) bundle.adapters->for_each(load);
    return bundle;
}

} // namespace blockpipe
