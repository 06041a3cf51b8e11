#include "recess/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "recess/error.hpp"

namespace recess::model {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in, const std::string& what) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw ValidationError(what + ": truncated checkpoint");
    return v;
}

}  // namespace

void save_checkpoint(const Network<float>& net, const std::filesystem::path& path, const json& extra) {
    json tensors = json::array();
    for (const auto& s : net.slots())
        tensors.push_back({{"name", s.name}, {"shape", s.shape}, {"offset", s.offset}, {"count", s.count}});
    json header{{"format", "recess-cad-checkpoint"},
                {"version", kCheckpointVersion},
                {"config", to_json(net.config())},
                {"tensors", tensors}};
    if (!extra.is_null()) header["extra"] = extra;
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const auto w = net.weights();
    out.write(reinterpret_cast<const char*>(w.data()), static_cast<std::streamsize>(w.size() * sizeof(float)));
    if (!out) throw IoError("failed writing " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    const std::string name = path.string();
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw ValidationError(name + " is not a model checkpoint");
    const auto version = get<std::uint32_t>(in, name);
    if (version != kCheckpointVersion)
        throw ValidationError(name + ": unsupported checkpoint version " + std::to_string(version));
    const auto len = get<std::uint64_t>(in, name);
    if (len > (1u << 26)) throw ValidationError(name + ": implausible header length");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw ValidationError(name + ": truncated header");

    json header;
    try {
        header = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ValidationError(name + ": corrupt header: " + e.what());
    }
    if (header.value("format", "") != "recess-cad-checkpoint") throw ValidationError(name + ": unknown format tag");

    Network<float> net(model_config_from_json(header.at("config")), 0);
    const auto& slots = net.slots();
    const auto& tensors = header.at("tensors");
    if (tensors.size() != slots.size()) throw ValidationError(name + ": tensor table does not match the config");
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& t = tensors[i];
        if (t.at("name").get<std::string>() != slots[i].name || t.at("count").get<std::size_t>() != slots[i].count ||
            t.at("offset").get<std::size_t>() != slots[i].offset)
            throw ValidationError(name + ": tensor '" + t.at("name").get<std::string>() + "' does not match the config");
    }
    auto w = net.weights();
    if (!in.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(w.size() * sizeof(float))))
        throw ValidationError(name + ": truncated weight data");
    if (in.peek() != std::char_traits<char>::eof()) throw ValidationError(name + ": trailing bytes after weights");
    return {std::move(net), header.value("extra", json())};
}

}  // namespace recess::model
