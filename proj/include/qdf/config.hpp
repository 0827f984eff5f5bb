#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "qdf/error.hpp"

namespace qdf {

/// One experiment configuration. The JSON schema is part of the external
/// interface: {seed, num_classes, n_train, n_test, N, C, K, I, alpha_init,
/// beta_init, epsilon, epochs, lr, mlp_hidden}; the synthetic-data knobs
/// (separation, view_noise, exclusive_fraction) are optional extras.
struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t num_classes = 8;
    std::size_t n_train = 512;
    std::size_t n_test = 512;
    std::size_t positions = 16;  // N
    std::size_t channels = 16;   // C
    std::size_t tokens = 16;     // K
    std::size_t iterations = 4;  // I
    double alpha_init = 0.5;
    double beta_init = 0.5;
    double epsilon = 1e-6;
    std::size_t epochs = 300;
    double lr = 1e-2;
    std::size_t mlp_hidden = 0; // 0 → 2C

    double separation = 3.0;
    double view_noise = 0.75;
    double exclusive_fraction = 0.5;

    std::size_t hidden() const { return mlp_hidden > 0 ? mlp_hidden : 2 * channels; }

    void validate() const {
        if (num_classes < 2) throw ConfigError("config: num_classes must be >= 2");
        if (n_train < 1 || n_test < 1) throw ConfigError("config: splits must be non-empty");
        if (positions < 1 || channels < 1) throw ConfigError("config: N and C must be >= 1");
        if (tokens < 1) throw ConfigError("config: K must be >= 1");
        if (iterations < 1) throw ConfigError("config: I must be >= 1");
        if (alpha_init <= 0.0 || alpha_init >= 1.0 || beta_init <= 0.0 || beta_init >= 1.0)
            throw ConfigError("config: alpha_init and beta_init must lie in (0, 1)");
        if (epsilon <= 0.0) throw ConfigError("config: epsilon must be > 0");
        if (lr <= 0.0) throw ConfigError("config: lr must be > 0");
        if (separation <= 0.0) throw ConfigError("config: separation must be > 0");
        if (view_noise < 0.0) throw ConfigError("config: view_noise must be >= 0");
        if (exclusive_fraction < 0.0 || exclusive_fraction > 1.0)
            throw ConfigError("config: exclusive_fraction must lie in [0, 1]");
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig cfg;
        try {
            cfg.seed = j.value("seed", cfg.seed);
            cfg.num_classes = j.value("num_classes", cfg.num_classes);
            cfg.n_train = j.value("n_train", cfg.n_train);
            cfg.n_test = j.value("n_test", cfg.n_test);
            cfg.positions = j.value("N", cfg.positions);
            cfg.channels = j.value("C", cfg.channels);
            cfg.tokens = j.value("K", cfg.tokens);
            cfg.iterations = j.value("I", cfg.iterations);
            cfg.alpha_init = j.value("alpha_init", cfg.alpha_init);
            cfg.beta_init = j.value("beta_init", cfg.beta_init);
            cfg.epsilon = j.value("epsilon", cfg.epsilon);
            cfg.epochs = j.value("epochs", cfg.epochs);
            cfg.lr = j.value("lr", cfg.lr);
            cfg.mlp_hidden = j.value("mlp_hidden", cfg.mlp_hidden);
            cfg.separation = j.value("separation", cfg.separation);
            cfg.view_noise = j.value("view_noise", cfg.view_noise);
            cfg.exclusive_fraction = j.value("exclusive_fraction", cfg.exclusive_fraction);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
        cfg.validate();
        return cfg;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config: cannot open " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config: parse error in " + path + ": " + e.what());
        }
        return from_json(j);
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"seed", seed},
                              {"num_classes", num_classes},
                              {"n_train", n_train},
                              {"n_test", n_test},
                              {"N", positions},
                              {"C", channels},
                              {"K", tokens},
                              {"I", iterations},
                              {"alpha_init", alpha_init},
                              {"beta_init", beta_init},
                              {"epsilon", epsilon},
                              {"epochs", epochs},
                              {"lr", lr},
                              {"mlp_hidden", mlp_hidden},
                              {"separation", separation},
                              {"view_noise", view_noise},
                              {"exclusive_fraction", exclusive_fraction}};
    }

    /// FNV-1a over the canonical JSON dump; used by the sweep fairness check.
    std::uint64_t hash() const {
        const std::string dump = to_json().dump();
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (unsigned char c : dump) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        return h;
    }
};

} // namespace qdf
