#include "crowdctx/core/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "crowdctx/core/errors.hpp"

namespace crowdctx {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) throw ParseError(std::string("truncated checkpoint: ") + what, pos_);
    }

    std::size_t pos() const { return pos_; }
    bool at_end() const { return pos_ == bytes_.size(); }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

CheckpointRecord to_record(const std::string& name, const Shape& shape,
                           std::span<const double> values) {
    CheckpointRecord r{name, shape, {}};
    r.values.reserve(values.size());
    for (double v : values) r.values.push_back(static_cast<float>(v));
    return r;
}

}  // namespace

const CheckpointRecord* Checkpoint::find(const std::string& name) const {
    for (const auto& r : records) {
        if (r.name == name) return &r;
    }
    return nullptr;
}

Checkpoint make_checkpoint(const ParameterStore& params, const AdamState* optimizer,
                           std::string config_text) {
    Checkpoint ckpt;
    ckpt.config_text = std::move(config_text);
    for (const auto& p : params.items()) {
        ckpt.records.push_back(to_record(p.name, p.tensor.shape(), p.tensor.data()));
    }
    if (optimizer && optimizer->m.size() == params.size()) {
        const double step = static_cast<double>(optimizer->step);
        ckpt.records.push_back(to_record("opt.step", {}, std::span<const double>(&step, 1)));
        const auto& items = params.items();
        for (std::size_t k = 0; k < items.size(); ++k) {
            ckpt.records.push_back(to_record("opt.m." + items[k].name, items[k].tensor.shape(), optimizer->m[k]));
            ckpt.records.push_back(to_record("opt.v." + items[k].name, items[k].tensor.shape(), optimizer->v[k]));
        }
    }
    return ckpt;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(ckpt.records.size()));
    for (const auto& r : ckpt.records) {
        if (shape_numel(r.shape) != r.values.size()) {
            throw ContractError("checkpoint record " + r.name + " has inconsistent shape");
        }
        put_u32(out, static_cast<std::uint32_t>(r.name.size()));
        out.insert(out.end(), r.name.begin(), r.name.end());
        put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
        for (auto d : r.shape) put_u32(out, static_cast<std::uint32_t>(d));
        for (float f : r.values) put_f32(out, f);
    }
    put_u32(out, static_cast<std::uint32_t>(ckpt.config_text.size()));
    out.insert(out.end(), ckpt.config_text.begin(), ckpt.config_text.end());
    return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader in(bytes);
    if (in.str(4, "magic") != std::string(kCheckpointMagic, 4)) throw ParseError("bad checkpoint magic", 0);
    const auto version = in.u32("version");
    if (version != kCheckpointVersion) {
        throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
    }
    Checkpoint ckpt;
    const auto count = in.u32("record count");
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointRecord r;
        r.name = in.str(in.u32("name length"), "name");
        const auto rank = in.u32("rank");
        if (rank > 8) throw ParseError("implausible rank in record " + r.name, in.pos() - 4);
        for (std::uint32_t d = 0; d < rank; ++d) r.shape.push_back(in.u32("dims"));
        const std::size_t n = shape_numel(r.shape);
        in.need(4 * n, "payload");
        r.values.reserve(n);
        for (std::size_t j = 0; j < n; ++j) r.values.push_back(in.f32("payload"));
        ckpt.records.push_back(std::move(r));
    }
    ckpt.config_text = in.str(in.u32("config length"), "config");
    if (!in.at_end()) throw ParseError("trailing bytes after checkpoint", in.pos());
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    const auto bytes = encode_checkpoint(ckpt);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

void restore_parameters(const Checkpoint& ckpt, ParameterStore& params) {
    for (const auto& p : params.items()) {
        const auto* r = ckpt.find(p.name);
        if (!r) throw ContractError("checkpoint is missing tensor " + p.name);
        if (r->shape != p.tensor.shape()) {
            throw ContractError("checkpoint tensor " + p.name + " has shape " + shape_string(r->shape) +
                                ", model expects " + shape_string(p.tensor.shape()));
        }
    }
    for (const auto& p : params.items()) {
        const auto* r = ckpt.find(p.name);
        Tensor t = p.tensor;
        auto dst = t.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = r->values[i];
    }
}

bool restore_optimizer(const Checkpoint& ckpt, const ParameterStore& params, AdamState& state) {
    const auto* step = ckpt.find("opt.step");
    if (!step) return false;
    std::vector<std::vector<double>> m, v;
    for (const auto& p : params.items()) {
        const auto* rm = ckpt.find("opt.m." + p.name);
        const auto* rv = ckpt.find("opt.v." + p.name);
        if (!rm || !rv || rm->shape != p.tensor.shape() || rv->shape != p.tensor.shape()) {
            throw ContractError("checkpoint optimizer state mismatch at " + p.name);
        }
        m.emplace_back(rm->values.begin(), rm->values.end());
        v.emplace_back(rv->values.begin(), rv->values.end());
    }
    state.step = static_cast<std::uint64_t>(step->values.at(0));
    state.m = std::move(m);
    state.v = std::move(v);
    return true;
}

}  // namespace crowdctx
