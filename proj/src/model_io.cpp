#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "apa/model.hpp"

namespace apa {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'A', 'P', 'A', 'M'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

json config_json(const ModelConfig& c, const Ablation& a) {
    return json{{"d_multi", c.d_multi},
                {"d_model", c.d_model},
                {"d_embed", c.d_embed},
                {"layers_phone", c.layers_phone},
                {"layers_subword", c.layers_subword},
                {"layers_utt", c.layers_utt},
                {"heads", c.heads},
                {"conv_kernels", c.conv_kernels},
                {"conv_kernel_size", c.conv_kernel_size},
                {"conv_stride", c.conv_stride},
                {"max_len", c.max_len},
                {"phone_vocab_size", c.phone_vocab_size},
                {"supphone_vocab_size", c.supphone_vocab_size},
                {"ffn_multiplier", c.ffn_multiplier},
                {"head_hidden", c.head_hidden},
                {"utt_head_depth", c.utt_head_depth},
                {"dropout", c.dropout},
                {"scale_pooled_mean", c.scale_pooled_mean},
                {"sup_phoneme", a.sup_phoneme},
                {"rel_pos", a.rel_pos},
                {"ds_conv", a.ds_conv}};
}

void config_parse(const json& j, ModelConfig& c, Ablation& a) {
    try {
        c.d_multi = j.at("d_multi").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.d_embed = j.at("d_embed").get<std::size_t>();
        c.layers_phone = j.at("layers_phone").get<std::size_t>();
        c.layers_subword = j.at("layers_subword").get<std::size_t>();
        c.layers_utt = j.at("layers_utt").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.conv_kernels = j.at("conv_kernels").get<std::size_t>();
        c.conv_kernel_size = j.at("conv_kernel_size").get<std::size_t>();
        c.conv_stride = j.at("conv_stride").get<std::size_t>();
        c.max_len = j.at("max_len").get<std::size_t>();
        c.phone_vocab_size = j.at("phone_vocab_size").get<std::size_t>();
        c.supphone_vocab_size = j.at("supphone_vocab_size").get<std::size_t>();
        c.ffn_multiplier = j.at("ffn_multiplier").get<std::size_t>();
        c.head_hidden = j.at("head_hidden").get<std::size_t>();
        c.utt_head_depth = j.at("utt_head_depth").get<std::size_t>();
        c.dropout = j.at("dropout").get<double>();
        c.scale_pooled_mean = j.at("scale_pooled_mean").get<bool>();
        a.sup_phoneme = j.at("sup_phoneme").get<bool>();
        a.rel_pos = j.at("rel_pos").get<bool>();
        a.ds_conv = j.at("ds_conv").get<bool>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
}

void atomic_write(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot rename " + tmp + " to " + path);
}

}  // namespace

std::string config_to_json(const ModelConfig& c, const Ablation& a) { return config_json(c, a).dump(); }

void config_from_json(const std::string& text, ModelConfig& c, Ablation& a) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ParseError("model config: invalid JSON");
    config_parse(j, c, a);
}

std::uint64_t config_digest(const ModelConfig& c, const Ablation& a) { return fnv1a(config_to_json(c, a)); }

void save_model(const std::string& path, const ModelParams<real>& p, const ModelConfig& cfg, const Ablation& abl) {
    json tensors = json::array();
    std::string blob;
    visit_params(p, [&tensors, &blob](const std::string& name, const Tensor<real>& t, ParamKind) {
        tensors.push_back(json{{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}});
        for (std::size_t i = 0; i < t.size(); ++i)
            put_u32(blob, std::bit_cast<std::uint32_t>(static_cast<float>(t[i])));
    });
    json header{{"config", config_json(cfg, abl)},
                {"config_digest", config_digest(cfg, abl)},
                {"tensors", std::move(tensors)}};
    const std::string header_text = header.dump();

    std::string out(kMagic, sizeof(kMagic));
    put_u32(out, kFormatVersion);
    put_u64(out, header_text.size());
    out += header_text;
    out += blob;
    put_u32(out, crc32(blob.data(), blob.size()));
    atomic_write(path, out);
}

LoadedModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < sizeof(kMagic) + 4 + 8 + 4 || bytes.compare(0, sizeof(kMagic), kMagic, sizeof(kMagic)) != 0)
        throw ParseError(path + ": not a model file");
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != kFormatVersion)
        throw ParseError(path + ": unsupported model format version " + std::to_string(version));
    const std::uint64_t header_len = get_u64(bytes, 8);
    const std::size_t header_at = sizeof(kMagic) + 4 + 8;
    if (header_at + header_len + 4 > bytes.size()) throw ParseError(path + ": truncated model file");

    json header = json::parse(bytes.substr(header_at, header_len), nullptr, false);
    if (header.is_discarded()) throw ParseError(path + ": corrupt model header");

    LoadedModel m;
    if (!header.contains("config") || !header.contains("tensors") || !header.contains("config_digest"))
        throw ParseError(path + ": incomplete model header");
    config_parse(header["config"], m.config, m.ablation);
    if (header["config_digest"].get<std::uint64_t>() != config_digest(m.config, m.ablation))
        throw ParseError(path + ": model header digest does not match its config");

    const std::size_t blob_at = header_at + header_len;
    const std::size_t blob_len = bytes.size() - blob_at - 4;
    const std::uint32_t stored_crc = get_u32(bytes, bytes.size() - 4);
    if (crc32(bytes.data() + blob_at, blob_len) != stored_crc)
        throw ChecksumError(path + ": model weights failed checksum");

    m.params = make_params<real>(m.config, m.ablation);
    const json& tensors = header["tensors"];
    std::size_t index = 0;
    std::size_t consumed = 0;
    visit_params(m.params, [&](const std::string& name, Tensor<real>& t, ParamKind) {
        if (index >= tensors.size()) throw ParseError(path + ": model manifest missing tensor " + name);
        const json& entry = tensors[index++];
        if (entry.at("name").get<std::string>() != name)
            throw ParseError(path + ": model manifest lists '" + entry.at("name").get<std::string>() +
                             "' where '" + name + "' was expected");
        if (entry.at("shape").get<Shape>() != t.shape())
            throw ParseError(path + ": tensor " + name + " has shape " +
                             shape_str(entry.at("shape").get<Shape>()) + ", expected " + shape_str(t.shape()));
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        if (offset + 4 * t.size() > blob_len) throw ParseError(path + ": tensor " + name + " overruns weight blob");
        for (std::size_t i = 0; i < t.size(); ++i)
            t[i] = static_cast<real>(std::bit_cast<float>(get_u32(bytes, blob_at + offset + 4 * i)));
        consumed += 4 * t.size();
    });
    if (index != tensors.size() || consumed != blob_len)
        throw ParseError(path + ": model manifest does not match the expected parameter set");
    return m;
}

ModelParams<real> load_params(const std::string& path, const ModelConfig& expect, const Ablation& expect_abl) {
    LoadedModel m = load_model(path);
    if (!(m.config == expect) || !(m.ablation == expect_abl))
        throw ConfigMismatchError(path + ": stored model config (digest " +
                                  std::to_string(config_digest(m.config, m.ablation)) +
                                  ") differs from the requested config (digest " +
                                  std::to_string(config_digest(expect, expect_abl)) + ")");
    return std::move(m.params);
}

}  // namespace apa
