// scmbias: measure stereotype bias in contextual encoders (SCM-grounded
// CEAT) and remove it with an orthogonal-projection fine-tuning objective.
//
// Pipeline: build-lexicon -> sample -> measure -> debias -> measure -> report
// (and project, for plot coordinates). Every command writes a manifest next
// to its artifacts; all randomness flows from --seed via named substreams.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "scmbias/scmbias.hpp"

namespace fs = std::filesystem;
using namespace scmbias;

namespace {

struct BackendOptions {
    std::string checkpoint_dir;
    int toy_layers = 2;
    int toy_hidden = 48;
    int toy_window = 1;
    int toy_max_piece = 12;

    void attach(CLI::App* cmd) {
        cmd->add_option("--checkpoint", checkpoint_dir, "Load the encoder from a checkpoint directory");
        cmd->add_option("--toy-layers", toy_layers, "Toy encoder: layer count")->check(CLI::PositiveNumber);
        cmd->add_option("--toy-hidden", toy_hidden, "Toy encoder: hidden dimension")->check(CLI::PositiveNumber);
        cmd->add_option("--toy-window", toy_window, "Toy encoder: context window");
        cmd->add_option("--toy-max-piece", toy_max_piece, "Toy encoder: max characters per piece")
            ->check(CLI::PositiveNumber);
    }

    std::unique_ptr<ToyEncoder> build(std::uint64_t seed) const {
        if (!checkpoint_dir.empty()) return load_toy_checkpoint(checkpoint_dir);
        ToyEncoderConfig cfg;
        cfg.seed = derive_seed(seed, "toy.init");
        cfg.n_layers = toy_layers;
        cfg.hidden_dim = toy_hidden;
        cfg.context_window = toy_window;
        cfg.max_piece_chars = toy_max_piece;
        return std::make_unique<ToyEncoder>(cfg);
    }
};

RunManifest begin_manifest(const std::string& command, std::uint64_t seed) {
    RunManifest m;
    m.command = command;
    m.seeds["root"] = seed;
    m.timestamp_utc = utc_now_iso8601();
    return m;
}

void finish_manifest(RunManifest& m, const std::string& artifact_path) {
    m.outputs.push_back(artifact_path);
    write_manifest(m, artifact_path + ".manifest.json");
}

int resolve_layer(int layer_flag, const EncoderBackend& backend) {
    int layer = layer_flag <= 0 ? backend.layer_count() : layer_flag;
    if (layer < 1 || layer > backend.layer_count())
        throw ValidationError("layer " + std::to_string(layer_flag) + " out of range 1.." +
                              std::to_string(backend.layer_count()));
    return layer;
}

EmbeddingPools build_embedding_pools(const EncoderBackend& backend, const SentencePool& pool,
                                     int layer) {
    EmbeddingPools pools;
    for (const auto& [surface, records] : pool.entries) {
        for (const auto& rec : records) {
            auto emb = embed_stimulus(backend, rec);
            pools[surface].push_back({emb.per_layer.at(static_cast<std::size_t>(layer - 1)),
                                      rec.source_id});
        }
    }
    return pools;
}

SentencePool filter_pool(const SentencePool& pool, const std::vector<StimulusTerm>& terms) {
    SentencePool out;
    out.provenance = pool.provenance;
    for (const auto& t : terms) {
        auto it = pool.entries.find(t.surface);
        if (it != pool.entries.end()) out.entries[t.surface] = it->second;
    }
    return out;
}

// ------------------------------------------------------------------
// build-lexicon
// ------------------------------------------------------------------

int cmd_build_lexicon(const std::string& terms_path, const std::string& freq_path, int top_k,
                      const std::string& out_path, std::uint64_t seed) {
    auto lex = load_lexicon(terms_path);
    auto manifest = begin_manifest("build-lexicon", seed);
    manifest.input_digests[terms_path] = file_digest(terms_path);

    if (!freq_path.empty()) {
        std::ifstream in(freq_path);
        if (!in) throw DataError("frequencies: cannot open '" + freq_path + "'");
        nlohmann::json fj;
        try {
            fj = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ValidationError("frequencies: parse error in '" + freq_path + "': " + e.what());
        }
        std::map<std::string, long long> freq;
        for (const auto& [k, v] : fj.items()) freq[k] = v.get<long long>();
        manifest.input_digests[freq_path] = file_digest(freq_path);

        for (auto& dim : lex.attribute_dimensions) {
            for (auto* pole : {&dim.pole_high, &dim.pole_low}) {
                std::vector<std::string> candidates;
                std::map<std::string, StimulusTerm> by_surface;
                for (const auto& t : *pole) {
                    candidates.push_back(t.surface);
                    by_surface[t.surface] = t;
                }
                auto selected = select_top_frequent(candidates, freq, top_k);
                if (selected.undersupplied)
                    std::cerr << "warning: dimension '" << dim.name << "': only "
                              << selected.terms.size() << " of " << top_k
                              << " requested terms available\n";
                std::vector<StimulusTerm> kept;
                for (const auto& s : selected.terms) kept.push_back(by_surface.at(s));
                *pole = std::move(kept);
            }
            dim.pole_cap = static_cast<std::size_t>(top_k);
        }
    }

    auto warnings = validate(lex);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

    // disjointness between fine-tuning stimuli and every evaluation spec
    auto debias_terms = lex.extraction_terms();
    for (const auto& spec : lex.bias_test_specs) {
        auto overlap = validate_disjoint(debias_terms, spec);
        for (const auto& s : overlap)
            std::cerr << "warning: '" << s << "' appears in both the fine-tuning stimuli and test '"
                      << spec.name << "'\n";
    }

    manifest.config_hash = digest_hex(nlohmann::json{{"top_k", top_k}}.dump());
    save_lexicon(lex, out_path);
    finish_manifest(manifest, out_path);
    std::cout << "wrote " << out_path << " (" << lex.stimulus_sets.size() << " stimulus sets, "
              << lex.attribute_dimensions.size() << " dimensions, " << lex.bias_test_specs.size()
              << " test specs)\n";
    return 0;
}

// ------------------------------------------------------------------
// sample
// ------------------------------------------------------------------

int cmd_sample(const std::string& corpus_path, const std::string& lexicon_path,
               const std::string& out_path, int max_tokens, std::size_t min_per_dimension,
               std::uint64_t seed, std::size_t dev_subsample, const std::string& dev_out,
               const std::string& corpus_id, const std::string& token_counter_name,
               const BackendOptions& backend_opts) {
    auto lex = load_lexicon(lexicon_path);
    auto stimuli = lex.all_stimuli();

    TokenCounter counter = whitespace_token_count;
    std::unique_ptr<ToyEncoder> tokenizer_backend;
    if (token_counter_name == "toy") {
        tokenizer_backend = backend_opts.build(seed);
        counter = [&backend = *tokenizer_backend](std::string_view text) {
            return static_cast<int>(backend.tokenize(text).size());
        };
    } else if (token_counter_name != "whitespace") {
        throw ValidationError("unknown token counter '" + token_counter_name + "'");
    }

    ExtractionConfig config;
    config.max_tokens = max_tokens;
    config.corpus_id = corpus_id;

    std::ifstream in(corpus_path);
    if (!in) throw DataError("corpus: cannot open '" + corpus_path + "'");
    auto result = extract_pool(in, stimuli, config, counter);
    result.pool.provenance.seed = seed;

    auto manifest = begin_manifest("sample", seed);
    manifest.input_digests[corpus_path] = file_digest(corpus_path);
    manifest.input_digests[lexicon_path] = file_digest(lexicon_path);
    manifest.config_hash = config.hash();

    save_pool(result.pool, out_path);
    finish_manifest(manifest, out_path);

    const auto& st = result.stats;
    std::cout << "documents: " << st.documents_read << " (skipped " << st.documents_skipped
              << "), sentences: " << st.sentences_seen << ", accepted: " << st.accepted
              << " (multi-stimulus " << st.rejected_multi_stimulus << ", over-budget "
              << st.rejected_over_budget << ")\n";

    auto stats = pool_stats(result.pool, lex, min_per_dimension);
    for (const auto& g : stats.per_dimension)
        std::cout << "  " << g.name << ": " << g.count << " sentences"
                  << (g.sufficient ? "" : "  [below floor]") << "\n";

    if (!dev_out.empty()) {
        auto dev = subsample_dev(result.pool, dev_subsample, derive_seed(seed, "corpus.dev"));
        auto dev_manifest = begin_manifest("sample --dev-subsample", seed);
        dev_manifest.input_digests[corpus_path] = manifest.input_digests[corpus_path];
        dev_manifest.config_hash = manifest.config_hash;
        save_pool(dev, dev_out);
        finish_manifest(dev_manifest, dev_out);
        std::cout << "dev subsample (" << dev_subsample << " per stimulus): " << dev_out << "\n";
    }
    return 0;
}

// ------------------------------------------------------------------
// measure
// ------------------------------------------------------------------

int cmd_measure(const std::string& lexicon_path, const std::string& pool_path,
                const std::string& embeddings_path, const std::string& dump_path,
                const std::string& out_path, const BackendOptions& backend_opts, int layer_flag,
                int n_samples, int per_term_draw, std::uint64_t seed) {
    auto lex = load_lexicon(lexicon_path);

    EmbeddingPools pools;
    std::string backend_id;
    auto manifest = begin_manifest("measure", seed);
    if (!embeddings_path.empty()) {
        // pre-computed contextual embeddings (embed dump interop)
        pools = load_embedding_dump(embeddings_path, layer_flag);
        backend_id = "dump:" + file_digest(embeddings_path);
        manifest.input_digests[embeddings_path] = file_digest(embeddings_path);
    } else {
        auto pool = load_pool(pool_path, lex.all_stimuli());
        auto backend = backend_opts.build(seed);
        const int layer = resolve_layer(layer_flag, *backend);
        pools = build_embedding_pools(*backend, pool, layer);
        backend_id = backend->config_hash();
        manifest.input_digests[pool_path] = file_digest(pool_path);
        if (!dump_path.empty()) {
            std::vector<StimulusEmbedding> embeddings;
            for (const auto& [surface, records] : pool.entries)
                for (const auto& rec : records) embeddings.push_back(embed_stimulus(*backend, rec));
            std::ofstream dump(dump_path);
            if (!dump) throw DataError("measure: cannot write '" + dump_path + "'");
            write_embedding_dump(dump, embeddings);
        }
    }

    nlohmann::json config{{"layer", layer_flag},
                          {"n_samples", n_samples},
                          {"per_term_draw", per_term_draw},
                          {"backend", backend_id}};
    const std::string config_hash = digest_hex(config.dump());

    std::vector<TestResult> results;
    for (const auto& spec : lex.bias_test_specs) {
        try {
            auto samples = sample_combinations(pools, spec, n_samples, per_term_draw,
                                               derive_seed(seed, "ceat." + spec.name));
            TestResult r;
            r.test_name = spec.name;
            r.meta = combine_random_effects(samples);
            r.config_hash = config_hash;
            r.seed = seed;
            results.push_back(std::move(r));
            const auto& meta = results.back().meta;
            std::cout << spec.name << ": CES=" << meta.ces << " p=" << meta.p << " ("
                      << to_string(meta.classification) << (meta.p < 0.05 ? ", *" : "") << ")\n";
        } catch (const Error& e) {
            throw Error(e.code(), "test '" + spec.name + "': " + e.what());
        }
    }

    manifest.input_digests[lexicon_path] = file_digest(lexicon_path);
    manifest.config_hash = config_hash;
    write_results(results, out_path, manifest.id());
    finish_manifest(manifest, out_path);
    return 0;
}

// ------------------------------------------------------------------
// debias
// ------------------------------------------------------------------

int cmd_debias(const std::string& config_path, const std::string& pool_path,
               const std::string& lexicon_path, const std::string& out_dir,
               const BackendOptions& backend_opts, const std::string& log_path,
               std::uint64_t seed) {
    DebiasConfig config;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw DataError("config: cannot open '" + config_path + "'");
        try {
            config = DebiasConfig::from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::parse_error& e) {
            throw ValidationError("config: parse error in '" + config_path + "': " + e.what());
        }
    }
    config.seed = derive_seed(seed, "train");

    auto lex = load_lexicon(lexicon_path);
    auto pool = load_pool(pool_path, lex.all_stimuli());

    std::vector<StimulusTerm> target_terms;
    for (const auto& set : lex.stimulus_sets)
        target_terms.insert(target_terms.end(), set.terms.begin(), set.terms.end());

    std::vector<AttributeDimension> dimensions;
    std::vector<StimulusTerm> attribute_terms;
    for (const auto& name : config.dimensions) {
        const auto* dim = lex.find_dimension(name);
        if (dim == nullptr) throw DataError("debias: lexicon has no dimension '" + name + "'");
        dimensions.push_back(*dim);
        auto terms = dim->all_terms();
        attribute_terms.insert(attribute_terms.end(), terms.begin(), terms.end());
    }

    auto target_pool = filter_pool(pool, target_terms);
    auto attribute_pool = filter_pool(pool, attribute_terms);

    auto backend = backend_opts.build(seed);
    auto directions = attribute_directions(*backend, attribute_pool, dimensions);

    auto log = train(*backend, target_pool, attribute_pool, directions, config);
    for (const auto& w : log.warnings) std::cerr << "warning: " << w << "\n";
    if (!log.epochs.empty())
        std::cout << "trained " << log.epochs.size() << " epochs; mean L went "
                  << log.epochs.front().mean_total << " -> " << log.epochs.back().mean_total << "\n";

    fs::create_directories(out_dir);
    export_checkpoint(*backend, out_dir);
    const std::string resolved_log = log_path.empty() ? out_dir + "/training_log.jsonl" : log_path;
    write_training_log(log, resolved_log);

    auto manifest = begin_manifest("debias", seed);
    manifest.input_digests[lexicon_path] = file_digest(lexicon_path);
    manifest.input_digests[pool_path] = file_digest(pool_path);
    if (!config_path.empty()) manifest.input_digests[config_path] = file_digest(config_path);
    manifest.config_hash = config.hash();
    manifest.seeds["train"] = config.seed;
    manifest.outputs.push_back(out_dir + "/checkpoint.json");
    manifest.outputs.push_back(resolved_log);
    write_manifest(manifest, out_dir + "/run_manifest.json");
    std::cout << "checkpoint written to " << out_dir << "\n";
    return 0;
}

// ------------------------------------------------------------------
// report
// ------------------------------------------------------------------

int cmd_report(const std::string& before_path, const std::string& after_path,
               const std::string& out_path, const std::string& csv_path, std::uint64_t seed) {
    auto before = load_results(before_path);
    auto after = load_results(after_path);
    auto report = build_comparison(before, after);
    auto text = render_text_report(report);
    std::cout << text;

    auto manifest = begin_manifest("report", seed);
    manifest.input_digests[before_path] = file_digest(before_path);
    manifest.input_digests[after_path] = file_digest(after_path);
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw DataError("report: cannot write '" + out_path + "'");
        out << text;
        finish_manifest(manifest, out_path);
    }
    if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw DataError("report: cannot write '" + csv_path + "'");
        out << render_csv_report(report);
        finish_manifest(manifest, csv_path);
    }
    return 0;
}

// ------------------------------------------------------------------
// project
// ------------------------------------------------------------------

int cmd_project(const std::string& lexicon_path, const std::string& pool_path,
                const std::string& out_path, const BackendOptions& backend_opts, int layer_flag,
                const std::vector<std::string>& dimension_names, std::uint64_t seed) {
    if (dimension_names.size() != 2)
        throw ValidationError("project: exactly two dimensions required");
    auto lex = load_lexicon(lexicon_path);
    auto pool = load_pool(pool_path, lex.all_stimuli());

    std::vector<AttributeDimension> dimensions;
    std::vector<StimulusTerm> attribute_terms;
    for (const auto& name : dimension_names) {
        const auto* dim = lex.find_dimension(name);
        if (dim == nullptr) throw DataError("project: lexicon has no dimension '" + name + "'");
        dimensions.push_back(*dim);
        auto terms = dim->all_terms();
        attribute_terms.insert(attribute_terms.end(), terms.begin(), terms.end());
    }

    auto backend = backend_opts.build(seed);
    const int layer = resolve_layer(layer_flag, *backend);
    auto directions = attribute_directions(*backend, filter_pool(pool, attribute_terms), dimensions);

    std::vector<StimulusEmbedding> embeddings;
    for (const auto& set : lex.stimulus_sets) {
        for (const auto& term : set.terms) {
            const auto* records = pool.find(term.surface);
            if (records == nullptr) continue;
            for (const auto& rec : *records) embeddings.push_back(embed_stimulus(*backend, rec));
        }
    }

    auto points = emit_projection_coordinates(embeddings, directions, dimension_names[0],
                                              dimension_names[1], layer);
    std::ofstream out(out_path);
    if (!out) throw DataError("project: cannot write '" + out_path + "'");
    out << render_projection_csv(points, dimension_names[0], dimension_names[1]);

    auto manifest = begin_manifest("project", seed);
    manifest.input_digests[lexicon_path] = file_digest(lexicon_path);
    manifest.input_digests[pool_path] = file_digest(pool_path);
    manifest.config_hash = digest_hex(nlohmann::json{{"layer", layer}, {"dims", dimension_names}}.dump());
    finish_manifest(manifest, out_path);
    std::cout << "wrote " << points.size() << " points to " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SCM-grounded bias measurement and orthogonal-projection debiasing for contextual encoders"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    std::uint64_t seed = 0;
    app.add_option("--seed", seed, "Root seed; all randomness derives from it")->capture_default_str();

    // build-lexicon
    auto* bl = app.add_subcommand("build-lexicon", "Validate and finalize a lexicon file");
    std::string bl_terms, bl_freq, bl_out;
    int bl_topk = 32;
    bl->add_option("--terms", bl_terms, "Candidate lexicon JSON")->required();
    bl->add_option("--frequencies", bl_freq, "JSON map term -> corpus count");
    bl->add_option("--top-k", bl_topk, "Keep the k most frequent terms per pole")->capture_default_str();
    bl->add_option("--out", bl_out, "Output lexicon path")->required();

    // sample
    auto* sp = app.add_subcommand("sample", "Extract stimulus sentence pools from a corpus");
    std::string sp_corpus, sp_lexicon, sp_out, sp_dev_out, sp_corpus_id = "corpus";
    std::string sp_counter = "whitespace";
    int sp_max_tokens = 128;
    std::size_t sp_floor = 24000, sp_dev = 1000;
    BackendOptions sp_backend;
    sp->add_option("--corpus", sp_corpus, "Newline-delimited text or NDJSON with a 'body' field")->required();
    sp->add_option("--lexicon", sp_lexicon, "Lexicon JSON")->required();
    sp->add_option("--out", sp_out, "Output pool path")->required();
    sp->add_option("--max-tokens", sp_max_tokens, "Token budget per sentence")->capture_default_str();
    sp->add_option("--min-per-dimension", sp_floor, "Sufficiency floor per dimension")->capture_default_str();
    sp->add_option("--dev-subsample", sp_dev, "Dev subsample size per stimulus")->capture_default_str();
    sp->add_option("--dev-out", sp_dev_out, "Write a dev subsample pool here");
    sp->add_option("--corpus-id", sp_corpus_id, "Corpus identifier recorded in provenance")->capture_default_str();
    sp->add_option("--token-counter", sp_counter, "whitespace | toy")->capture_default_str();
    sp_backend.attach(sp);

    // measure
    auto* ms = app.add_subcommand("measure", "Run the CEAT over every bias test spec");
    std::string ms_lexicon, ms_pool, ms_embeddings, ms_dump, ms_out;
    int ms_layer = -1, ms_samples = 1000, ms_draw = 1;
    BackendOptions ms_backend;
    ms->add_option("--lexicon", ms_lexicon, "Lexicon JSON")->required();
    auto* ms_pool_opt = ms->add_option("--pool", ms_pool, "Sentence pool JSON");
    ms->add_option("--embeddings", ms_embeddings, "Read pre-computed embeddings (JSON-lines dump)")
        ->excludes(ms_pool_opt);
    ms->add_option("--dump-embeddings", ms_dump, "Also write the embeddings as a JSON-lines dump");
    ms->add_option("--out", ms_out, "Output results path")->required();
    ms->add_option("--layer", ms_layer, "Embedding layer (default: last)")->capture_default_str();
    ms->add_option("--n-samples", ms_samples, "Combinations to sample per test")->capture_default_str();
    ms->add_option("--per-term-draw", ms_draw, "Embeddings drawn per stimulus per combination")
        ->capture_default_str();
    ms_backend.attach(ms);

    // debias
    auto* db = app.add_subcommand("debias", "Fine-tune the encoder with the projection objective");
    std::string db_config, db_pool, db_lexicon, db_out, db_log;
    BackendOptions db_backend;
    db->add_option("--config", db_config, "Debias config JSON (defaults used when omitted)");
    db->add_option("--pool", db_pool, "Sentence pool JSON")->required();
    db->add_option("--lexicon", db_lexicon, "Lexicon JSON")->required();
    db->add_option("--out", db_out, "Checkpoint output directory")->required();
    db->add_option("--log", db_log, "Training log path (default <out>/training_log.jsonl)");
    db_backend.attach(db);

    // report
    auto* rp = app.add_subcommand("report", "Render a before/after comparison table");
    std::string rp_before, rp_after, rp_out, rp_csv;
    rp->add_option("--before", rp_before, "Results JSON before debiasing")->required();
    rp->add_option("--after", rp_after, "Results JSON after debiasing")->required();
    rp->add_option("--out", rp_out, "Write the text table here");
    rp->add_option("--csv", rp_csv, "Write the CSV table here");

    // project
    auto* pj = app.add_subcommand("project", "Emit 2D projection coordinates for plotting");
    std::string pj_lexicon, pj_pool, pj_out;
    std::vector<std::string> pj_dims = {"warmth", "competence"};
    int pj_layer = -1;
    BackendOptions pj_backend;
    pj->add_option("--lexicon", pj_lexicon, "Lexicon JSON")->required();
    pj->add_option("--pool", pj_pool, "Sentence pool JSON")->required();
    pj->add_option("--out", pj_out, "Output CSV path")->required();
    pj->add_option("--layer", pj_layer, "Embedding layer (default: last)")->capture_default_str();
    pj->add_option("--dimensions", pj_dims, "Two dimension names")->delimiter(',')->expected(2);
    pj_backend.attach(pj);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (bl->parsed()) return cmd_build_lexicon(bl_terms, bl_freq, bl_topk, bl_out, seed);
        if (sp->parsed())
            return cmd_sample(sp_corpus, sp_lexicon, sp_out, sp_max_tokens, sp_floor, seed, sp_dev,
                              sp_dev_out, sp_corpus_id, sp_counter, sp_backend);
        if (ms->parsed()) {
            if (ms_pool.empty() && ms_embeddings.empty())
                throw ValidationError("measure: either --pool or --embeddings is required");
            return cmd_measure(ms_lexicon, ms_pool, ms_embeddings, ms_dump, ms_out, ms_backend,
                               ms_layer, ms_samples, ms_draw, seed);
        }
        if (db->parsed())
            return cmd_debias(db_config, db_pool, db_lexicon, db_out, db_backend, db_log, seed);
        if (rp->parsed()) return cmd_report(rp_before, rp_after, rp_out, rp_csv, seed);
        if (pj->parsed())
            return cmd_project(pj_lexicon, pj_pool, pj_out, pj_backend, pj_layer, pj_dims, seed);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
