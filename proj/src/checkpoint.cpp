#include "tcupgan/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tcupgan {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

void put_u64(std::string& out, std::uint64_t v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.append(buf, 8);
}

ParameterSet extract(const Checkpoint& ckpt, const std::string& prefix) {
    ParameterSet out;
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.starts_with(prefix)) out.emplace(name.substr(prefix.size()), t);
    }
    return out;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json index = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        const Shape s = t.shape();
        index.push_back({{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}});
        offset += t.size() * sizeof(float);
    }
    const nlohmann::json header = {{"metadata", ckpt.metadata}, {"tensors", index}};
    const std::string header_text = header.dump();

    std::string out = std::string(kCheckpointMagic) + "\n";
    put_u64(out, header_text.size());
    out += header_text;
    out.reserve(out.size() + offset);
    for (const auto& [name, t] : ckpt.tensors) {
        out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
    }
    return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    const std::string magic = std::string(kCheckpointMagic) + "\n";
    if (bytes.compare(0, magic.size(), magic) != 0) {
        throw ValidationError(std::string("not a checkpoint: missing magic ") + kCheckpointMagic);
    }
    std::size_t pos = magic.size();
    if (bytes.size() < pos + 8) throw ValidationError("checkpoint truncated in header length");
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data() + pos, 8);
    pos += 8;
    if (bytes.size() < pos + header_len) throw ValidationError("checkpoint truncated in header");
    const auto header = nlohmann::json::parse(bytes.substr(pos, header_len));
    pos += header_len;

    Checkpoint ckpt;
    ckpt.metadata = header.at("metadata");
    for (const auto& entry : header.at("tensors")) {
        const auto dims = entry.at("shape").get<std::vector<int>>();
        if (dims.size() != 4) throw ValidationError("checkpoint tensor shape must have 4 dims");
        const Shape shape{dims[0], dims[1], dims[2], dims[3]};
        const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
        const std::size_t nbytes = shape.numel() * sizeof(float);
        if (bytes.size() < pos + off + nbytes) {
            throw ValidationError("checkpoint truncated in tensor '" +
                                  entry.at("name").get<std::string>() + "'");
        }
        std::vector<float> values(shape.numel());
        std::memcpy(values.data(), bytes.data() + pos + off, nbytes);
        ckpt.tensors.emplace(entry.at("name").get<std::string>(), Tensor(shape, std::move(values)));
    }
    return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
        const std::string bytes = serialize_checkpoint(ckpt);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

void store_generator(Checkpoint& ckpt, const GeneratorParams& params) {
    params.validate();
    ckpt.metadata["generator"] = params.config.to_json();
    for (const auto& [name, t] : params.tensors) ckpt.tensors["generator/" + name] = t;
}

void store_discriminator(Checkpoint& ckpt, const DiscriminatorParams& params) {
    params.validate();
    ckpt.metadata["discriminator"] = params.config.to_json();
    for (const auto& [name, t] : params.tensors) ckpt.tensors["discriminator/" + name] = t;
}

GeneratorParams load_generator(const Checkpoint& ckpt) {
    if (!ckpt.metadata.contains("generator")) {
        throw ValidationError("checkpoint holds no generator");
    }
    GeneratorParams params{GeneratorConfig::from_json(ckpt.metadata["generator"]),
                           extract(ckpt, "generator/")};
    params.validate();
    return params;
}

DiscriminatorParams load_discriminator(const Checkpoint& ckpt) {
    if (!ckpt.metadata.contains("discriminator")) {
        throw ValidationError("checkpoint holds no discriminator");
    }
    DiscriminatorParams params{DiscriminatorConfig::from_json(ckpt.metadata["discriminator"]),
                               extract(ckpt, "discriminator/")};
    params.validate();
    return params;
}

}  // namespace tcupgan
