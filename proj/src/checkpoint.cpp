// SPDX-License-Identifier: Apache-2.0
#include "slotmerge/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace slotmerge {

namespace {

constexpr char kMagic[] = "SLOTCKPT v1";

void write_f64_le(std::ostream& out, const double* data, std::size_t count) {
    // Host is assumed little-endian for the fast path; the byte swap keeps
    // the format pinned on big-endian hosts.
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &data[i], 8);
        unsigned char bytes[8];
        for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
        out.write(reinterpret_cast<const char*>(bytes), 8);
    }
}

double read_f64_le(std::istream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw FormatError("cannot open checkpoint file for writing: " + tmp);
        out << kMagic << " " << tensors.size() << "\n";
        std::size_t offset = 0;
        for (const auto& [name, tensor] : tensors) {
            out << name << " " << tensor.ndim();
            for (std::size_t d : tensor.shape()) out << " " << d;
            out << " " << offset << "\n";
            offset += tensor.numel() * 8;
        }
        out << "END\n";
        for (const auto& [name, tensor] : tensors)
            write_f64_le(out, tensor.values().data(), tensor.numel());
        if (!out) throw FormatError("failed writing checkpoint payload: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("checkpoint header truncated");
    std::istringstream first(line);
    std::string word1, word2;
    std::size_t count = 0;
    first >> word1 >> word2 >> count;
    if (word1 + " " + word2 != kMagic)
        throw FormatError("unknown checkpoint format: " + line);

    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::size_t offset;
        std::size_t numel;
    };
    std::vector<Entry> entries;
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) throw FormatError("checkpoint header truncated");
        std::istringstream ls(line);
        Entry e;
        std::size_t ndim = 0;
        if (!(ls >> e.name >> ndim)) throw FormatError("bad checkpoint header line: " + line);
        e.shape.resize(ndim);
        e.numel = 1;
        for (std::size_t d = 0; d < ndim; ++d) {
            if (!(ls >> e.shape[d])) throw FormatError("bad checkpoint header line: " + line);
            e.numel *= e.shape[d];
        }
        if (!(ls >> e.offset)) throw FormatError("bad checkpoint header line: " + line);
        entries.push_back(std::move(e));
    }
    if (!std::getline(in, line) || line != "END")
        throw FormatError("checkpoint header missing END marker");

    const std::streampos payload_start = in.tellg();
    NamedTensors result;
    result.reserve(entries.size());
    for (const Entry& e : entries) {
        in.seekg(payload_start + static_cast<std::streamoff>(e.offset));
        std::vector<double> values(e.numel);
        for (std::size_t i = 0; i < e.numel; ++i) values[i] = read_f64_le(in);
        if (!in) throw FormatError("checkpoint payload truncated at tensor " + e.name);
        result.emplace_back(e.name, Tensor::from(e.shape, std::move(values)));
    }
    return result;
}

}  // namespace slotmerge
