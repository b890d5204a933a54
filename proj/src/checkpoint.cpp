#include "ldp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "ldp/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace ldp {

namespace {

constexpr char kMagic[8] = {'L', 'D', 'P', 'C', 'K', 'P', 'T', '\x01'};

void write_u64(std::ofstream& out, uint64_t v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.write(buf, 8);
}

uint64_t read_u64(std::ifstream& in) {
    char buf[8];
    in.read(buf, 8);
    uint64_t v;
    std::memcpy(&v, buf, 8);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::json header;
    header["schema"] = "ldp-checkpoint v1";
    header["kind"] = ckpt.kind;
    header["meta"] = ckpt.meta;
    auto& dir = header["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : ckpt.tensors) {
        if (!t.defined()) throw ContractError("checkpoint: undefined tensor " + name);
        dir.push_back({{"name", name}, {"shape", t.shape()}});
    }
    std::string header_text = header.dump();

    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("checkpoint: cannot open for writing: " + tmp);
        out.write(kMagic, 8);
        write_u64(out, header_text.size());
        out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
        for (const auto& [name, t] : ckpt.tensors) {
            (void)name;
            auto d = t.data();
            out.write(reinterpret_cast<const char*>(d.data()),
                      static_cast<std::streamsize>(d.size() * sizeof(double)));
        }
        if (!out) throw DataError("checkpoint: write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw DataError("checkpoint: atomic rename failed: " + path);
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw DataError("checkpoint: bad magic (not a checkpoint file): " + path);
    }
    uint64_t hlen = read_u64(in);
    std::string header_text(hlen, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw DataError("checkpoint: truncated header: " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint: malformed header: ") + e.what());
    }
    if (header.value("schema", "") != "ldp-checkpoint v1") {
        throw DataError("checkpoint: unsupported schema: " + header.value("schema", "?"));
    }

    Checkpoint ckpt;
    ckpt.kind = header.value("kind", "");
    ckpt.meta = header.value("meta", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        ad::Shape shape = entry.at("shape").get<std::vector<size_t>>();
        size_t n = 1;
        for (size_t d : shape) n *= d;
        std::vector<double> data(n);
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw DataError("checkpoint: truncated tensor data: " + name);
        ckpt.tensors.emplace_back(name, ad::Tensor::from(shape, std::move(data)));
    }
    return ckpt;
}

uint64_t fnv1a64_bytes(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("digest: cannot open: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        std::streamsize got = in.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

}  // namespace ldp
