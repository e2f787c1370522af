#include "tokmerge/weights_io.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace tokmerge {

namespace {

bool host_is_little_endian() {
    const uint16_t probe = 1;
    uint8_t byte;
    std::memcpy(&byte, &probe, 1);
    return byte == 1;
}

void byteswap_floats(std::vector<float>& v) {
    for (float& f : v) {
        uint32_t u;
        std::memcpy(&u, &f, 4);
        u = ((u & 0xff000000u) >> 24) | ((u & 0x00ff0000u) >> 8) | ((u & 0x0000ff00u) << 8) |
            ((u & 0x000000ffu) << 24);
        std::memcpy(&f, &u, 4);
    }
}

}  // namespace

void TensorContainer::add(const std::string& name, Mat m) {
    require(tensors.find(name) == tensors.end(), "container: duplicate tensor " + name);
    order.push_back(name);
    tensors.emplace(name, std::move(m));
}

const Mat& TensorContainer::get(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), "container: missing tensor " + name);
    return it->second;
}

void save_container(const std::string& path, const TensorContainer& c) {
    nlohmann::json header;
    header["format"] = c.format;
    header["version"] = 1;
    header["endianness"] = "little";
    if (!c.meta_json.empty()) header["meta"] = nlohmann::json::parse(c.meta_json);
    nlohmann::json tensors = nlohmann::json::array();
    uint64_t blob_bytes = 0;
    for (const std::string& name : c.order) {
        const Mat& m = c.tensors.at(name);
        tensors.push_back({{"name", name}, {"shape", {m.rows, m.cols}}});
        blob_bytes += m.size() * sizeof(float);
    }
    header["tensors"] = std::move(tensors);
    header["blob_bytes"] = blob_bytes;

    const std::string h = header.dump();
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "cannot write " + path);
    const uint64_t hlen = h.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const std::string& name : c.order) {
        const Mat& m = c.tensors.at(name);
        if (host_is_little_endian()) {
            out.write(reinterpret_cast<const char*>(m.data.data()),
                      static_cast<std::streamsize>(m.size() * sizeof(float)));
        } else {
            std::vector<float> swapped = m.data;
            byteswap_floats(swapped);
            out.write(reinterpret_cast<const char*>(swapped.data()),
                      static_cast<std::streamsize>(swapped.size() * sizeof(float)));
        }
    }
    require(out.good(), "write failed: " + path);
}

TensorContainer load_container(const std::string& path, const std::string& expect_format) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    require(in.good(), "cannot open " + path);
    const uint64_t file_bytes = static_cast<uint64_t>(in.tellg());
    in.seekg(0);
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    require(in.good() && hlen > 0 && hlen < file_bytes, "corrupt container header length");
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json header = nlohmann::json::parse(htext);

    TensorContainer c;
    c.format = header.at("format").get<std::string>();
    require(expect_format.empty() || c.format == expect_format,
            "container format '" + c.format + "' != expected '" + expect_format + "'");
    require(header.at("endianness").get<std::string>() == "little", "container must be little-endian");
    if (header.contains("meta")) c.meta_json = header["meta"].dump();

    uint64_t blob_bytes = 0;
    for (const auto& t : header.at("tensors")) {
        blob_bytes += static_cast<uint64_t>(t.at("shape")[0].get<int>()) * t.at("shape")[1].get<int>() *
                      sizeof(float);
    }
    require(8 + hlen + blob_bytes == file_bytes, "container byte length mismatch");
    require(blob_bytes == header.at("blob_bytes").get<uint64_t>(), "declared blob length mismatch");

    for (const auto& t : header.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const int rows = t.at("shape")[0].get<int>();
        const int cols = t.at("shape")[1].get<int>();
        Mat m(rows, cols);
        in.read(reinterpret_cast<char*>(m.data.data()),
                static_cast<std::streamsize>(m.size() * sizeof(float)));
        require(in.good(), "container truncated at tensor " + name);
        if (!host_is_little_endian()) byteswap_floats(m.data);
        c.add(name, std::move(m));
    }
    return c;
}

namespace {

Mat vec_as_mat(const std::vector<float>& v) { return Mat(1, static_cast<int>(v.size()), v); }

std::vector<float> mat_as_vec(const Mat& m) { return m.data; }

void add_layer(TensorContainer& c, const std::string& prefix, const LayerWeights& lw) {
    c.add(prefix + ".ln1.gamma", vec_as_mat(lw.ln1_gamma));
    c.add(prefix + ".ln1.beta", vec_as_mat(lw.ln1_beta));
    c.add(prefix + ".attn.wq", lw.wq);
    c.add(prefix + ".attn.bq", vec_as_mat(lw.bq));
    c.add(prefix + ".attn.wk", lw.wk);
    c.add(prefix + ".attn.bk", vec_as_mat(lw.bk));
    c.add(prefix + ".attn.wv", lw.wv);
    c.add(prefix + ".attn.bv", vec_as_mat(lw.bv));
    c.add(prefix + ".attn.wo", lw.wo);
    c.add(prefix + ".attn.bo", vec_as_mat(lw.bo));
    c.add(prefix + ".ln2.gamma", vec_as_mat(lw.ln2_gamma));
    c.add(prefix + ".ln2.beta", vec_as_mat(lw.ln2_beta));
    c.add(prefix + ".ffn.w1", lw.w_fc1);
    c.add(prefix + ".ffn.b1", vec_as_mat(lw.b_fc1));
    c.add(prefix + ".ffn.w2", lw.w_fc2);
    c.add(prefix + ".ffn.b2", vec_as_mat(lw.b_fc2));
}

LayerWeights read_layer(const TensorContainer& c, const std::string& prefix) {
    LayerWeights lw;
    lw.ln1_gamma = mat_as_vec(c.get(prefix + ".ln1.gamma"));
    lw.ln1_beta = mat_as_vec(c.get(prefix + ".ln1.beta"));
    lw.wq = c.get(prefix + ".attn.wq");
    lw.bq = mat_as_vec(c.get(prefix + ".attn.bq"));
    lw.wk = c.get(prefix + ".attn.wk");
    lw.bk = mat_as_vec(c.get(prefix + ".attn.bk"));
    lw.wv = c.get(prefix + ".attn.wv");
    lw.bv = mat_as_vec(c.get(prefix + ".attn.bv"));
    lw.wo = c.get(prefix + ".attn.wo");
    lw.bo = mat_as_vec(c.get(prefix + ".attn.bo"));
    lw.ln2_gamma = mat_as_vec(c.get(prefix + ".ln2.gamma"));
    lw.ln2_beta = mat_as_vec(c.get(prefix + ".ln2.beta"));
    lw.w_fc1 = c.get(prefix + ".ffn.w1");
    lw.b_fc1 = mat_as_vec(c.get(prefix + ".ffn.b1"));
    lw.w_fc2 = c.get(prefix + ".ffn.w2");
    lw.b_fc2 = mat_as_vec(c.get(prefix + ".ffn.b2"));
    return lw;
}

nlohmann::json config_json(const ModelConfig& cfg) {
    return {
        {"num_layers", cfg.num_layers}, {"width", cfg.width}, {"heads", cfg.heads},
        {"ffn_dim", cfg.ffn_dim}, {"patch_grid", cfg.patch_grid},
        {"tokens_per_frame", cfg.tokens_per_frame}, {"frame_count", cfg.frame_count},
        {"patch_size", cfg.patch_size}, {"text_vocab_size", cfg.text_vocab_size},
        {"text_max_len", cfg.text_max_len}, {"embed_dim", cfg.embed_dim},
        {"proportional_attention", cfg.proportional_attention}, {"temperature", cfg.temperature},
        {"lora_rank", cfg.lora_rank}, {"lora_alpha", cfg.lora_alpha},
    };
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.num_layers = j.at("num_layers").get<int>();
    cfg.width = j.at("width").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.ffn_dim = j.at("ffn_dim").get<int>();
    cfg.patch_grid = j.at("patch_grid").get<int>();
    cfg.tokens_per_frame = j.at("tokens_per_frame").get<int>();
    cfg.frame_count = j.at("frame_count").get<int>();
    cfg.patch_size = j.at("patch_size").get<int>();
    cfg.text_vocab_size = j.at("text_vocab_size").get<int>();
    cfg.text_max_len = j.at("text_max_len").get<int>();
    cfg.embed_dim = j.at("embed_dim").get<int>();
    cfg.proportional_attention = j.at("proportional_attention").get<bool>();
    cfg.temperature = j.at("temperature").get<float>();
    cfg.lora_rank = j.at("lora_rank").get<int>();
    cfg.lora_alpha = j.at("lora_alpha").get<float>();
    return cfg;
}

}  // namespace

void save_weights(const std::string& path, const ModelConfig& cfg, const EncoderWeights& w) {
    TensorContainer c;
    c.format = "tokmerge.weights";
    c.meta_json = config_json(cfg).dump();
    c.add("visual.patch_proj", w.visual.patch_proj);
    for (size_t l = 0; l < w.visual.layers.size(); ++l) {
        add_layer(c, "visual.layer" + std::to_string(l), w.visual.layers[l]);
    }
    c.add("visual.ln_final.gamma", vec_as_mat(w.visual.ln_final_gamma));
    c.add("visual.ln_final.beta", vec_as_mat(w.visual.ln_final_beta));
    c.add("visual.proj", w.visual.proj);
    c.add("text.token_embedding", w.text.token_embedding);
    c.add("text.pos_embedding", w.text.pos_embedding);
    for (size_t l = 0; l < w.text.layers.size(); ++l) {
        add_layer(c, "text.layer" + std::to_string(l), w.text.layers[l]);
    }
    c.add("text.ln_final.gamma", vec_as_mat(w.text.ln_final_gamma));
    c.add("text.ln_final.beta", vec_as_mat(w.text.ln_final_beta));
    c.add("text.proj", w.text.proj);
    save_container(path, c);
}

EncoderWeights load_weights(const std::string& path, ModelConfig* cfg_out) {
    const TensorContainer c = load_container(path, "tokmerge.weights");
    const ModelConfig cfg = config_from_json(nlohmann::json::parse(c.meta_json));
    cfg.validate();
    if (cfg_out != nullptr) *cfg_out = cfg;
    EncoderWeights w;
    w.visual.patch_proj = c.get("visual.patch_proj");
    for (int l = 0; l < cfg.num_layers; ++l) {
        w.visual.layers.push_back(read_layer(c, "visual.layer" + std::to_string(l)));
    }
    w.visual.ln_final_gamma = mat_as_vec(c.get("visual.ln_final.gamma"));
    w.visual.ln_final_beta = mat_as_vec(c.get("visual.ln_final.beta"));
    w.visual.proj = c.get("visual.proj");
    w.text.token_embedding = c.get("text.token_embedding");
    w.text.pos_embedding = c.get("text.pos_embedding");
    for (int l = 0; l < cfg.num_layers; ++l) {
        w.text.layers.push_back(read_layer(c, "text.layer" + std::to_string(l)));
    }
    w.text.ln_final_gamma = mat_as_vec(c.get("text.ln_final.gamma"));
    w.text.ln_final_beta = mat_as_vec(c.get("text.ln_final.beta"));
    w.text.proj = c.get("text.proj");
    return w;
}

void save_trainable(const std::string& path, const ModelConfig& cfg, const LoraParams& lora,
                    const ClipPositionalEmbeddings& cpe) {
    TensorContainer c;
    c.format = "tokmerge.trainable";
    nlohmann::json meta = config_json(cfg);
    meta["lora_rank"] = lora.rank;
    meta["lora_alpha"] = lora.alpha;
    meta["cpe_steps"] = cpe.steps.size();
    c.meta_json = meta.dump();
    auto add_tower = [&](const std::string& prefix, const LoraTower& t) {
        for (size_t l = 0; l < t.layers.size(); ++l) {
            const std::string p = prefix + ".layer" + std::to_string(l);
            c.add(p + ".q_down", t.layers[l].q_down);
            c.add(p + ".q_up", t.layers[l].q_up);
            c.add(p + ".k_down", t.layers[l].k_down);
            c.add(p + ".k_up", t.layers[l].k_up);
            c.add(p + ".v_down", t.layers[l].v_down);
            c.add(p + ".v_up", t.layers[l].v_up);
        }
    };
    add_tower("lora.visual", lora.visual);
    add_tower("lora.text", lora.text);
    for (size_t s = 0; s < cpe.steps.size(); ++s) {
        c.add("cpe.step" + std::to_string(s), cpe.steps[s]);
    }
    save_container(path, c);
}

void load_trainable(const std::string& path, LoraParams* lora, ClipPositionalEmbeddings* cpe) {
    const TensorContainer c = load_container(path, "tokmerge.trainable");
    const nlohmann::json meta = nlohmann::json::parse(c.meta_json);
    const int layers = meta.at("num_layers").get<int>();
    if (lora != nullptr) {
        lora->rank = meta.at("lora_rank").get<int>();
        lora->alpha = meta.at("lora_alpha").get<float>();
        auto read_tower = [&](const std::string& prefix, LoraTower& t) {
            t.layers.clear();
            for (int l = 0; l < layers; ++l) {
                const std::string p = prefix + ".layer" + std::to_string(l);
                LoraLayer ll;
                ll.q_down = c.get(p + ".q_down");
                ll.q_up = c.get(p + ".q_up");
                ll.k_down = c.get(p + ".k_down");
                ll.k_up = c.get(p + ".k_up");
                ll.v_down = c.get(p + ".v_down");
                ll.v_up = c.get(p + ".v_up");
                t.layers.push_back(std::move(ll));
            }
        };
        read_tower("lora.visual", lora->visual);
        read_tower("lora.text", lora->text);
    }
    if (cpe != nullptr) {
        cpe->steps.clear();
        const size_t n = meta.at("cpe_steps").get<size_t>();
        for (size_t s = 0; s < n; ++s) cpe->steps.push_back(c.get("cpe.step" + std::to_string(s)));
    }
}

std::string weights_digest(const EncoderWeights& w) {
    std::string bytes;
    auto append_vec = [&](const std::vector<float>& v) {
        bytes.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
    };
    auto append_layer = [&](const LayerWeights& lw) {
        append_vec(lw.ln1_gamma); append_vec(lw.ln1_beta);
        append_vec(lw.wq.data); append_vec(lw.bq);
        append_vec(lw.wk.data); append_vec(lw.bk);
        append_vec(lw.wv.data); append_vec(lw.bv);
        append_vec(lw.wo.data); append_vec(lw.bo);
        append_vec(lw.ln2_gamma); append_vec(lw.ln2_beta);
        append_vec(lw.w_fc1.data); append_vec(lw.b_fc1);
        append_vec(lw.w_fc2.data); append_vec(lw.b_fc2);
    };
    append_vec(w.visual.patch_proj.data);
    for (const LayerWeights& lw : w.visual.layers) append_layer(lw);
    append_vec(w.visual.ln_final_gamma); append_vec(w.visual.ln_final_beta);
    append_vec(w.visual.proj.data);
    append_vec(w.text.token_embedding.data);
    append_vec(w.text.pos_embedding.data);
    for (const LayerWeights& lw : w.text.layers) append_layer(lw);
    append_vec(w.text.ln_final_gamma); append_vec(w.text.ln_final_beta);
    append_vec(w.text.proj.data);
    return bytes;
}

}  // namespace tokmerge
