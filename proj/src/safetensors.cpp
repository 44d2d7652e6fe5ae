// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#include "safetensors.hpp"

#include <algorithm>
#include <fstream>

#include <fcntl.h>
#include <unistd.h>

#include <fmt/format.h>
#include <json.hpp>

#include "errors.hpp"

namespace fs = std::filesystem;

namespace moeprune {

size_t TensorMeta::numel() const {
    size_t n = 1;
    for (size_t s : shape) n *= s;
    return n;
}

ShardHeader read_header(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw format_error(fmt::format("cannot open '{}'", file.string()));

    in.seekg(0, std::ios::end);
    const uint64_t file_size = static_cast<uint64_t>(in.tellg());
    in.seekg(0);

    uint8_t len_bytes[8];
    in.read(reinterpret_cast<char*>(len_bytes), 8);
    if (!in) throw format_error(fmt::format("'{}': truncated header length", file.string()));
    uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | len_bytes[i];

    if (8 + header_len > file_size) {
        throw format_error(fmt::format("'{}': header length {} exceeds file size {}",
                                       file.string(), header_len, file_size));
    }

    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw format_error(fmt::format("'{}': truncated header", file.string()));

    nlohmann::ordered_json doc;
    try {
        doc = nlohmann::ordered_json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw format_error(fmt::format("'{}': malformed header JSON: {}", file.string(), e.what()));
    }
    if (!doc.is_object()) throw format_error(fmt::format("'{}': header is not a JSON object", file.string()));

    ShardHeader out;
    out.data_offset = 8 + header_len;
    const uint64_t data_size = file_size - out.data_offset;

    for (auto& [name, entry] : doc.items()) {
        if (name == "__metadata__") continue;
        TensorMeta meta;
        meta.name = name;
        meta.shard = file.filename().string();
        try {
            meta.dtype = dtype_from_tag(entry.at("dtype").get<std::string>());
            meta.shape = entry.at("shape").get<std::vector<size_t>>();
            const auto offs = entry.at("data_offsets").get<std::vector<uint64_t>>();
            if (offs.size() != 2) throw format_error("data_offsets must have two entries");
            meta.begin = offs[0];
            meta.end = offs[1];
        } catch (const nlohmann::json::exception& e) {
            throw format_error(fmt::format("'{}': bad entry for tensor '{}': {}",
                               file.string(), name, e.what()));
        }
        if (meta.end < meta.begin || meta.end > data_size) {
            throw format_error(fmt::format("'{}': tensor '{}' range [{}, {}) exceeds data block of {} bytes",
                               file.string(), name, meta.begin, meta.end, data_size));
        }
        if (meta.payload_bytes() != meta.numel() * dtype_width(meta.dtype)) {
            throw format_error(fmt::format("'{}': tensor '{}' range length {} does not match shape",
                               file.string(), name, meta.payload_bytes()));
        }
        out.tensors.push_back(std::move(meta));
    }

    // ranges within one shard must not overlap
    std::vector<const TensorMeta*> sorted;
    sorted.reserve(out.tensors.size());
    for (const auto& t : out.tensors) sorted.push_back(&t);
    std::sort(sorted.begin(), sorted.end(),
              [](const TensorMeta* a, const TensorMeta* b) { return a->begin < b->begin; });
    for (size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i]->begin < sorted[i - 1]->end) {
            throw format_error(fmt::format("'{}': tensors '{}' and '{}' overlap",
                               file.string(), sorted[i - 1]->name, sorted[i]->name));
        }
    }
    return out;
}

struct CheckpointReader::Shard {
    fs::path file;
    int fd = -1;
    uint64_t data_offset = 0;
    std::vector<TensorMeta> tensors;

    ~Shard() {
        if (fd >= 0) ::close(fd);
    }
};

CheckpointReader::CheckpointReader(const fs::path& dir_or_file) : root_(dir_or_file) {
    fs::path target = dir_or_file;
    if (fs::is_directory(target)) {
        const fs::path index = target / "model.safetensors.index.json";
        const fs::path single = target / "model.safetensors";
        if (fs::exists(index)) {
            target = index;
        } else if (fs::exists(single)) {
            target = single;
        } else {
            throw format_error(fmt::format("no model.safetensors[.index.json] in '{}'", target.string()));
        }
    } else if (!fs::exists(target)) {
        throw format_error(fmt::format("checkpoint path '{}' does not exist", target.string()));
    } else {
        root_ = target.parent_path();
    }

    if (target.filename().string().ends_with(".index.json")) {
        sharded_ = true;
        std::ifstream in(target);
        nlohmann::ordered_json doc;
        try {
            doc = nlohmann::ordered_json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw format_error(fmt::format("'{}': malformed index: {}", target.string(), e.what()));
        }
        if (!doc.contains("weight_map")) {
            throw format_error(fmt::format("'{}': index has no weight_map", target.string()));
        }
        std::vector<std::string> shard_files;
        for (auto& [tensor, file] : doc["weight_map"].items()) {
            (void)tensor;
            const auto f = file.get<std::string>();
            if (std::find(shard_files.begin(), shard_files.end(), f) == shard_files.end()) {
                shard_files.push_back(f);
            }
        }
        std::sort(shard_files.begin(), shard_files.end());
        for (const auto& f : shard_files) add_shard(target.parent_path() / f);
    } else {
        add_shard(target);
    }
}

CheckpointReader::~CheckpointReader() = default;

void CheckpointReader::add_shard(const fs::path& file) {
    auto shard = std::make_unique<Shard>();
    shard->file = file;
    ShardHeader header = read_header(file);
    shard->data_offset = header.data_offset;
    shard->tensors = std::move(header.tensors);
    shard->fd = ::open(file.c_str(), O_RDONLY);
    if (shard->fd < 0) throw format_error(fmt::format("cannot open '{}'", file.string()));

    const size_t shard_idx = shards_.size();
    for (size_t i = 0; i < shard->tensors.size(); ++i) {
        const auto& name = shard->tensors[i].name;
        if (index_.contains(name)) {
            throw format_error(fmt::format("duplicate tensor '{}' across shards", name));
        }
        index_.emplace(name, std::make_pair(shard_idx, i));
        order_.push_back(name);
    }
    shards_.push_back(std::move(shard));
}

bool CheckpointReader::contains(const std::string& name) const {
    return index_.contains(name);
}

const TensorMeta& CheckpointReader::meta(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw validation_error(fmt::format("tensor '{}' not present in checkpoint", name));
    }
    return shards_[it->second.first]->tensors[it->second.second];
}

std::vector<std::byte> CheckpointReader::read_raw(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw validation_error(fmt::format("tensor '{}' not present in checkpoint", name));
    }
    const Shard& shard = *shards_[it->second.first];
    const TensorMeta& m = shard.tensors[it->second.second];
    std::vector<std::byte> buf(m.payload_bytes());
    uint64_t off = shard.data_offset + m.begin;
    size_t done = 0;
    while (done < buf.size()) {
        const ssize_t n = ::pread(shard.fd, buf.data() + done, buf.size() - done,
                                  static_cast<off_t>(off + done));
        if (n <= 0) {
            throw format_error(fmt::format("short read of '{}' from '{}'", name, shard.file.string()));
        }
        done += static_cast<size_t>(n);
    }
    return buf;
}

std::vector<float> CheckpointReader::read_values(const std::string& name) const {
    const TensorMeta& m = meta(name);
    const auto raw = read_raw(name);
    try {
        return decode(raw, m.dtype, m.numel());
    } catch (const validation_error& e) {
        throw validation_error(fmt::format("tensor '{}': {}", name, e.what()));
    }
}

Tensor2D CheckpointReader::read_tensor2d(const std::string& name) const {
    const TensorMeta& m = meta(name);
    auto values = read_values(name);
    size_t rows = 1, cols = m.numel();
    if (m.shape.size() == 2) {
        rows = m.shape[0];
        cols = m.shape[1];
    } else if (m.shape.size() > 2) {
        throw validation_error(fmt::format("tensor '{}' has rank {} (expected <= 2)",
                               name, m.shape.size()));
    }
    return Tensor2D(rows, cols, std::move(values));
}

uint64_t CheckpointReader::total_payload_bytes() const {
    uint64_t total = 0;
    for (const auto& shard : shards_)
        for (const auto& t : shard->tensors) total += t.payload_bytes();
    return total;
}

// ---------------------------------------------------------------------------

CheckpointWriter::CheckpointWriter(fs::path dir, uint64_t shard_limit, std::string basename)
    : dir_(std::move(dir)), shard_limit_(shard_limit), basename_(std::move(basename)) {
    fs::create_directories(dir_);
}

void CheckpointWriter::register_tensor(const std::string& name, Dtype dtype,
                                       std::vector<size_t> shape) {
    if (finalized_) throw validation_error("cannot register tensors after finalize_layout()");
    if (by_name_.contains(name)) {
        throw validation_error(fmt::format("duplicate tensor name '{}'", name));
    }
    Pending p;
    p.name = name;
    p.dtype = dtype;
    p.bytes = dtype_width(dtype);
    for (size_t s : shape) p.bytes *= s;
    p.shape = std::move(shape);
    by_name_.emplace(name, pending_.size());
    pending_.push_back(std::move(p));
}

std::string CheckpointWriter::shard_filename(size_t idx) const {
    if (num_shards_ <= 1) return basename_ + ".safetensors";
    return fmt::format("{}-{:05}-of-{:05}.safetensors", basename_, idx + 1, num_shards_);
}

void CheckpointWriter::finalize_layout() {
    if (finalized_) return;
    finalized_ = true;

    // greedy packing in registration order
    uint64_t used = 0;
    size_t shard = 0;
    bool first_in_shard = true;
    for (auto& p : pending_) {
        if (shard_limit_ > 0 && p.bytes > shard_limit_) {
            throw validation_error(fmt::format("tensor '{}' ({} bytes) exceeds shard limit {}",
                                   p.name, p.bytes, shard_limit_));
        }
        if (shard_limit_ > 0 && !first_in_shard && used + p.bytes > shard_limit_) {
            shard++;
            used = 0;
            first_in_shard = true;
        }
        p.shard = shard;
        p.begin = used;
        used += p.bytes;
        first_in_shard = false;
    }
    num_shards_ = pending_.empty() ? 1 : shard + 1;

    // emit every shard header now; payloads are appended afterwards
    for (size_t s = 0; s < num_shards_; ++s) {
        nlohmann::ordered_json header = nlohmann::ordered_json::object();
        for (const auto& p : pending_) {
            if (p.shard != s) continue;
            header[p.name] = {{"dtype", dtype_tag(p.dtype)},
                              {"shape", p.shape},
                              {"data_offsets", {p.begin, p.begin + p.bytes}}};
        }
        const std::string json = header.dump();
        const fs::path file = dir_ / shard_filename(s);
        std::ofstream out(file, std::ios::binary | std::ios::trunc);
        if (!out) throw format_error(fmt::format("cannot create '{}'", file.string()));
        uint64_t len = json.size();
        uint8_t len_bytes[8];
        for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<uint8_t>(len >> (8 * i));
        out.write(reinterpret_cast<const char*>(len_bytes), 8);
        out.write(json.data(), static_cast<std::streamsize>(json.size()));
        if (!out) throw format_error(fmt::format("write failed on '{}'", file.string()));
    }
}

void CheckpointWriter::write(const std::string& name, std::span<const std::byte> bytes) {
    if (!finalized_) finalize_layout();
    if (next_write_ >= pending_.size() || pending_[next_write_].name != name) {
        throw validation_error(fmt::format("tensors must be written in registration order; "
                                           "expected '{}', got '{}'",
                                           next_write_ < pending_.size() ? pending_[next_write_].name
                                                                         : "<none>",
                                           name));
    }
    const Pending& p = pending_[next_write_];
    if (bytes.size() != p.bytes) {
        throw validation_error(fmt::format("tensor '{}': payload is {} bytes, registered {}",
                               name, bytes.size(), p.bytes));
    }
    const fs::path file = dir_ / shard_filename(p.shard);
    std::ofstream out(file, std::ios::binary | std::ios::app);
    if (!out) throw format_error(fmt::format("cannot append to '{}'", file.string()));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw format_error(fmt::format("write failed on '{}'", file.string()));
    next_write_++;
}

void CheckpointWriter::finish() {
    if (!finalized_) finalize_layout();
    if (next_write_ != pending_.size()) {
        throw validation_error(fmt::format("{} of {} registered tensors written",
                               next_write_, pending_.size()));
    }
    if (num_shards_ <= 1) return;  // single shard needs no index

    nlohmann::ordered_json index;
    uint64_t total = 0;
    for (const auto& p : pending_) total += p.bytes;
    index["metadata"] = {{"total_size", total}};
    nlohmann::ordered_json weight_map = nlohmann::ordered_json::object();
    for (const auto& p : pending_) weight_map[p.name] = shard_filename(p.shard);
    index["weight_map"] = std::move(weight_map);

    const fs::path file = dir_ / (basename_ + ".safetensors.index.json");
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw format_error(fmt::format("cannot create '{}'", file.string()));
    out << index.dump(2) << "\n";
}

void write_checkpoint(const std::vector<TensorSpec>& tensors, const fs::path& dir,
                      uint64_t shard_limit) {
    CheckpointWriter writer(dir, shard_limit);
    for (const auto& t : tensors) writer.register_tensor(t.name, t.dtype, t.shape);
    writer.finalize_layout();
    for (const auto& t : tensors) writer.write(t.name, t.bytes);
    writer.finish();
}

} // namespace moeprune
