#pragma once

// Checkpoint persistence: a text manifest (one line per tensor: name,
// space-separated shape, byte offset, element count) plus a blob of
// little-endian 32-bit floats in manifest order. The manifest's first line
// is the magic string "GRAPHECHO-CKPT-1".

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "graphecho/error.hpp"
#include "graphecho/tensor.hpp"

namespace graphecho {

inline constexpr const char* kCheckpointMagic = "GRAPHECHO-CKPT-1";

// Ordered parameter collection. Order is insertion order and defines the
// blob layout as well as the deterministic update order in the optimizer.
template <typename S>
class ParamStore {
  public:
    void add(const std::string& name, Tensor<S> value) {
        if (index_.count(name)) throw ShapeError("param store: duplicate name '" + name + "'");
        index_[name] = names_.size();
        names_.push_back(name);
        values_.push_back(std::move(value));
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    Tensor<S>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ShapeError("param store: unknown name '" + name + "'");
        return values_[it->second];
    }
    const Tensor<S>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ShapeError("param store: unknown name '" + name + "'");
        return values_[it->second];
    }

    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return names_.size(); }
    Tensor<S>& value(size_t i) { return values_[i]; }
    const Tensor<S>& value(size_t i) const { return values_[i]; }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& v : values_) n += v.numel();
        return n;
    }

  private:
    std::vector<std::string> names_;
    std::vector<Tensor<S>> values_;
    std::map<std::string, size_t> index_;
};

namespace detail {

inline void write_f32_le(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    char b[4] = {char(bits & 0xff), char((bits >> 8) & 0xff), char((bits >> 16) & 0xff),
                 char((bits >> 24) & 0xff)};
    os.write(b, 4);
}

inline float read_f32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    uint32_t bits = uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
                    (uint32_t(b[3]) << 24);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

// Writes <prefix>.manifest and <prefix>.blob. Values are stored as f32
// regardless of the run precision.
template <typename S>
void save_checkpoint(const ParamStore<S>& store, const std::string& prefix) {
    std::ofstream manifest(prefix + ".manifest");
    if (!manifest) throw IoError("cannot write " + prefix + ".manifest");
    std::ofstream blob(prefix + ".blob", std::ios::binary);
    if (!blob) throw IoError("cannot write " + prefix + ".blob");
    manifest << kCheckpointMagic << "\n";
    int64_t offset = 0;
    for (size_t i = 0; i < store.size(); ++i) {
        const Tensor<S>& t = store.value(i);
        manifest << store.names()[i];
        for (int e : t.shape) manifest << " " << e;
        manifest << " " << offset << " " << t.numel() << "\n";
        for (int64_t j = 0; j < t.numel(); ++j) detail::write_f32_le(blob, float(t.data[j]));
        offset += t.numel() * 4;
    }
    if (!manifest || !blob) throw IoError("checkpoint write failed for prefix " + prefix);
}

template <typename S>
ParamStore<S> load_checkpoint(const std::string& prefix) {
    std::ifstream manifest(prefix + ".manifest");
    if (!manifest) throw IoError("cannot open " + prefix + ".manifest");
    std::ifstream blob(prefix + ".blob", std::ios::binary);
    if (!blob) throw IoError("cannot open " + prefix + ".blob");
    std::string line;
    if (!std::getline(manifest, line) || line != kCheckpointMagic)
        throw IoError(prefix + ".manifest: bad magic line '" + line + "'");
    ParamStore<S> store;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name;
        ls >> name;
        std::vector<int64_t> fields;
        int64_t v;
        while (ls >> v) fields.push_back(v);
        if (fields.size() < 2)
            throw IoError(prefix + ".manifest: malformed line '" + line + "'");
        const int64_t count = fields.back();
        const int64_t offset = fields[fields.size() - 2];
        std::vector<int> shape(fields.begin(), fields.end() - 2);
        if (shape_numel(shape) != count)
            throw IoError(prefix + ".manifest: shape/count mismatch on '" + name + "'");
        blob.seekg(offset);
        ArrayX<S> data(count);
        for (int64_t j = 0; j < count; ++j) data[j] = S(detail::read_f32_le(blob));
        if (!blob) throw IoError(prefix + ".blob: short read for '" + name + "'");
        store.add(name, Tensor<S>(std::move(shape), std::move(data)));
    }
    return store;
}

}  // namespace graphecho
