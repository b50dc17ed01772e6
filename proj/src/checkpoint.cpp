#include "evalnet/checkpoint.hpp"

#include <cstring>

#include "evalnet/io_util.hpp"

namespace evalnet {

namespace {

constexpr char kMagic[8] = {'E', 'V', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kFormatVersion = 1;

}  // namespace

void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::string& path) {
    nlohmann::json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["stage"] = meta.stage;
    manifest["epoch"] = meta.epoch;
    manifest["validation_rmse_log"] = meta.validation_rmse_log;
    manifest["config"] = model.config().to_json();
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : model.parameters()) {
        const std::uint64_t len = t.size() * 4;
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset},
                           {"len", len}});
        offset += len;
    }
    manifest["tensors"] = std::move(tensors);
    const std::string mtext = manifest.dump();

    std::vector<std::uint8_t> out;
    out.reserve(sizeof(kMagic) + 4 + mtext.size() + offset);
    out.insert(out.end(), kMagic, kMagic + sizeof(kMagic));
    const std::uint32_t mlen = static_cast<std::uint32_t>(mtext.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(mlen >> (8 * i)));
    out.insert(out.end(), mtext.begin(), mtext.end());
    for (const auto& [name, t] : model.parameters()) {
        for (double v : t.data()) {
            const float f = static_cast<float>(v);
            std::uint8_t bytes[4];
            std::memcpy(bytes, &f, 4);
            out.insert(out.end(), bytes, bytes + 4);
        }
    }
    write_binary_file_atomic(path, out.data(), out.size());
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::vector<std::uint8_t> buf = read_binary_file(path);
    if (buf.size() < sizeof(kMagic) + 4 || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
        throw DataError("checkpoint: bad magic in " + path);
    std::uint32_t mlen = 0;
    for (int i = 0; i < 4; ++i) mlen |= static_cast<std::uint32_t>(buf[sizeof(kMagic) + i]) << (8 * i);
    const std::size_t blob_start = sizeof(kMagic) + 4 + mlen;
    if (buf.size() < blob_start) throw DataError("checkpoint: truncated manifest in " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(buf.begin() + sizeof(kMagic) + 4,
                                         buf.begin() + static_cast<std::ptrdiff_t>(blob_start));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint: manifest parse failure: ") + e.what());
    }
    try {
        if (manifest.at("format_version").get<int>() != kFormatVersion)
            throw DataError("checkpoint: unsupported format_version in " + path);
        CheckpointMeta meta;
        meta.stage = manifest.at("stage").get<int>();
        meta.epoch = manifest.at("epoch").get<int>();
        meta.validation_rmse_log = manifest.at("validation_rmse_log").get<double>();
        Model model(ModelConfig::from_json(manifest.at("config")));

        const std::size_t blob_size = buf.size() - blob_start;
        std::size_t loaded = 0;
        for (const auto& entry : manifest.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
            const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
            const std::uint64_t len = entry.at("len").get<std::uint64_t>();
            Tensor* param = model.find_parameter(name);
            if (!param) throw DataError("checkpoint: unknown parameter " + name);
            if (param->shape() != shape)
                throw DataError("checkpoint: shape mismatch for " + name + ": file has " +
                                shape_str(shape) + ", config implies " +
                                shape_str(param->shape()));
            if (len != param->size() * 4 || offset + len > blob_size)
                throw DataError("checkpoint: truncated blob for " + name);
            const std::uint8_t* src = buf.data() + blob_start + offset;
            auto dst = param->mutable_data();
            for (std::size_t i = 0; i < param->size(); ++i) {
                float f;
                std::memcpy(&f, src + 4 * i, 4);
                dst[i] = static_cast<double>(f);
            }
            ++loaded;
        }
        if (loaded != model.parameters().size())
            throw DataError("checkpoint: parameter count mismatch in " + path);
        return Checkpoint{std::move(model), meta};
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint: bad manifest field: ") + e.what());
    }
}

}  // namespace evalnet
