#include "latentkit/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

#include "latentkit/error.hpp"

namespace latentkit {

namespace {

constexpr char kMagic[8] = {'L', 'T', 'K', 'C', 'K', 'P', 'T', '1'};

void put_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint64_t get_u64_le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

uint64_t double_bits(double d) {
    uint64_t v;
    std::memcpy(&v, &d, sizeof(v));
    return v;
}

double bits_double(uint64_t v) {
    double d;
    std::memcpy(&d, &v, sizeof(d));
    return d;
}

nlohmann::json read_manifest(std::ifstream& in, const std::string& path) {
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw UsageError("checkpoint: bad magic in " + path);
    }
    unsigned char lenbuf[8];
    in.read(reinterpret_cast<char*>(lenbuf), 8);
    if (!in) throw UsageError("checkpoint: truncated manifest length in " + path);
    const uint64_t mlen = get_u64_le(lenbuf);
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw UsageError("checkpoint: truncated manifest in " + path);
    nlohmann::json manifest = nlohmann::json::parse(mtext, nullptr, false);
    if (manifest.is_discarded()) throw UsageError("checkpoint: malformed manifest in " + path);
    return manifest;
}

} // namespace

void save_checkpoint(const std::string& path, std::span<Param* const> params) {
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    nlohmann::json tensors = nlohmann::json::array();
    uint64_t offset = 0;
    for (Param* p : params) {
        nlohmann::json t;
        t["name"] = p->name;
        t["shape"] = p->value.shape;
        t["offset"] = offset;
        t["count"] = p->value.data.size();
        tensors.push_back(std::move(t));
        offset += p->value.data.size();
    }
    manifest["tensors"] = std::move(tensors);
    const std::string mtext = manifest.dump();

    std::string out;
    out.append(kMagic, 8);
    put_u64_le(out, mtext.size());
    out += mtext;
    for (Param* p : params) {
        for (double v : p->value.data) put_u64_le(out, double_bits(v));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw UsageError("checkpoint: cannot write " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

void load_checkpoint(const std::string& path, std::span<Param* const> params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("checkpoint: cannot open " + path);
    nlohmann::json manifest = read_manifest(in, path);
    const std::streampos payload_start = in.tellg();

    for (Param* p : params) {
        bool found = false;
        for (const auto& t : manifest.at("tensors")) {
            if (t.at("name").get<std::string>() != p->name) continue;
            found = true;
            const std::vector<int64_t> shape = t.at("shape").get<std::vector<int64_t>>();
            if (shape != p->value.shape) {
                throw DimensionError("checkpoint: shape mismatch for " + p->name);
            }
            const uint64_t offset = t.at("offset").get<uint64_t>();
            const uint64_t count = t.at("count").get<uint64_t>();
            in.seekg(payload_start + static_cast<std::streamoff>(offset * 8));
            std::vector<unsigned char> buf(count * 8);
            in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
            if (!in) throw UsageError("checkpoint: truncated payload in " + path);
            for (uint64_t i = 0; i < count; ++i) {
                p->value.data[i] = bits_double(get_u64_le(buf.data() + i * 8));
            }
            break;
        }
        if (!found) throw StateError("checkpoint: missing tensor " + p->name + " in " + path);
    }
}

std::vector<CheckpointEntry> checkpoint_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("checkpoint: cannot open " + path);
    nlohmann::json manifest = read_manifest(in, path);
    std::vector<CheckpointEntry> out;
    for (const auto& t : manifest.at("tensors")) {
        CheckpointEntry e;
        e.name = t.at("name").get<std::string>();
        e.shape = t.at("shape").get<std::vector<int64_t>>();
        out.push_back(std::move(e));
    }
    return out;
}

} // namespace latentkit
