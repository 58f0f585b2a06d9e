#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "bitivf/dataset.hpp"
#include "bitivf/error.hpp"
#include "bitivf/index.hpp"
#include "bitivf/search.hpp"
#include "bitivf/shard.hpp"

namespace bitivf::cli {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Raised for bad flag values found after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AblationMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::size_t parse_auto(const std::string& flag, const std::string& value) {
  if (value == "auto") return 0;
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used == value.size() && v > 0) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw UsageError(flag + " expects a positive integer or 'auto', got '" + value + "'");
}

std::vector<std::size_t> parse_list(const std::string& flag, const std::string& value) {
  std::vector<std::size_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_auto(flag, item));
  if (out.empty()) throw UsageError(flag + " is empty");
  return out;
}

std::size_t default_workers() {
  if (const char* env = std::getenv("BITIVF_WORKERS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("BITIVF_WORKERS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void require_file(const std::string& flag, const std::string& path) {
  if (!fs::exists(path)) throw UsageError(flag + ": no such file '" + path + "'");
}

fs::path manifest_path_for(const fs::path& index_path) {
  auto p = index_path;
  p += ".manifest.json";
  return p;
}

// Search-side flags shared by search, bench and ablate.
struct SearchFlags {
  std::string index;
  std::string base;
  std::string queries;
  std::size_t query_limit = 0;
  std::size_t k = 10;
  std::string n_probe = "auto";
  std::size_t rerank_factor = 10;
  std::string kernel = "gather";
  std::string schedule = "block";
  std::string pipeline = "stage2";
  std::string pruning = "on";
  std::string rerank = "on";
  std::size_t batch = 64;
  std::size_t workers = 0;

  void add_to(CLI::App& app, bool config_flags) {
    app.add_option("--index", index, "Index file (or its manifest)")->required();
    app.add_option("--base", base, "Base vectors, overriding the manifest");
    app.add_option("--queries", queries, "Query vectors (fvecs/bvecs)")->required();
    app.add_option("--query-limit", query_limit, "Read at most this many queries");
    app.add_option("--k", k, "Neighbors per query")->check(CLI::PositiveNumber);
    app.add_option("--batch", batch, "Queries per batch")->check(CLI::PositiveNumber);
    app.add_option("--workers", workers, "Worker threads (default $BITIVF_WORKERS or all cores)")
        ->check(CLI::PositiveNumber);
    if (!config_flags) return;
    app.add_option("--nprobe", n_probe, "Clusters probed per query, or auto");
    app.add_option("--rerank-factor", rerank_factor, "M = k * rerank factor")
        ->check(CLI::PositiveNumber);
    app.add_option("--kernel", kernel)->check(CLI::IsMember({"select", "gather"}));
    app.add_option("--schedule", schedule)->check(CLI::IsMember({"query", "block"}));
    app.add_option("--pipeline", pipeline)->check(CLI::IsMember({"none", "stage2", "stage3"}));
    app.add_option("--pruning", pruning)->check(CLI::IsMember({"on", "off"}));
    app.add_option("--rerank", rerank, "off returns coarse distances")
        ->check(CLI::IsMember({"on", "off"}));
  }

  SearchParams params() const {
    SearchParams p;
    p.k = k;
    p.n_probe = parse_auto("--nprobe", n_probe);
    p.rerank_factor = rerank_factor;
    p.batch_size = batch;
    p.workers = workers == 0 ? default_workers() : workers;
    p.kernel = kernel == "select" ? Kernel::kSelect : Kernel::kGather;
    p.scheduling = schedule == "query" ? Scheduling::kQueryLevel : Scheduling::kBlockLevel;
    p.pipeline = pipeline == "none"     ? Pipeline::kNone
                 : pipeline == "stage3" ? Pipeline::kStage3
                                        : Pipeline::kStage2;
    p.pruning = pruning == "on";
    p.exact_rerank = rerank == "on";
    return p;
  }
};

struct Engine {
  ShardedIndex index;
  std::shared_ptr<const FloatMatrix> base;
  std::vector<RawStore> stores;
  nlohmann::json manifest;

  std::size_t n_list() const { return index.shards.front().n_list; }
  std::uint64_t size() const { return index.total_vectors(); }

  std::vector<SearchResult> search(const FloatMatrix& queries, const SearchParams& p,
                                   SearchStats* stats) const {
    if (index.shard_count() == 1) {
      return search_batch(index.shards.front(), stores.front(), queries, p, stats);
    }
    return search_sharded(index, stores, queries, p, stats);
  }
};

Engine open_engine(const SearchFlags& flags) {
  Engine e;
  fs::path manifest = flags.index;
  if (manifest.extension() != ".json") manifest = manifest_path_for(flags.index);
  std::string base_path = flags.base;
  std::size_t base_limit = 0;
  if (!fs::exists(flags.index) && !fs::exists(manifest)) {
    throw UsageError("--index: no such index or manifest '" + flags.index + "'");
  }
  if (fs::exists(manifest)) {
    auto loaded = load_sharded(manifest);
    e.index = std::move(loaded.index);
    e.manifest = nlohmann::json::parse(loaded.manifest_json);
    if (base_path.empty() && e.manifest.contains("base")) {
      fs::path p = e.manifest["base"].get<std::string>();
      if (p.is_relative()) p = manifest.parent_path() / p;
      base_path = p.string();
      base_limit = e.manifest.value("limit", std::size_t{0});
    }
  } else {
    e.index.shards.push_back(load(flags.index));
    const auto n = e.index.shards.front().total_vectors;
    e.index.shard_of.assign(n, 0);
  }
  if (base_path.empty()) {
    throw UsageError("no base vectors: pass --base or build with a manifest");
  }
  require_file("--base", base_path);
  e.base = std::make_shared<const FloatMatrix>(load_dataset(base_path, base_limit).vectors);
  const auto& first = e.index.shards.front();
  if (e.base->rows() != e.size() || e.base->cols() != first.dim) {
    throw InvalidData("base vectors (" + std::to_string(e.base->rows()) + " x " +
                      std::to_string(e.base->cols()) + ") do not match the index (" +
                      std::to_string(e.size()) + " x " + std::to_string(first.dim) + ")");
  }
  // Every shard can resolve every id; ShardedSource routes by owner anyway.
  e.stores.assign(e.index.shard_count(), RawStore(e.base));
  return e;
}

FloatMatrix load_queries(const SearchFlags& flags, std::size_t dim) {
  require_file("--queries", flags.queries);
  auto q = load_dataset(flags.queries, flags.query_limit).vectors;
  if (q.rows() > 0 && q.cols() != dim) {
    throw InvalidData("queries have dimension " + std::to_string(q.cols()) +
                      ", index has " + std::to_string(dim));
  }
  return q;
}

IdLists to_ivecs_rows(const std::vector<SearchResult>& results) {
  return to_id_lists(results);
}

// ---- CSV ----

const char* kCsvHeader =
    "kernel,schedule,pipeline,pruning,rerank,batch,workers,k,nprobe,rerank_factor,"
    "queries,recall@10,recall@100,recall@300,qps,probe_s,coarse_s,topk_s,rerank_s,"
    "total_s,wall_s,idle_slots,prune_skips,heap_insertions";

struct Row {
  SearchParams params;
  std::size_t n_probe = 0;
  std::size_t queries = 0;
  std::optional<double> recall[3];
  double wall = 0.0;
  SearchStats stats;
};

std::string format_row(const Row& r) {
  std::ostringstream o;
  o << std::setprecision(6);
  const auto& p = r.params;
  o << to_string(p.kernel) << ',' << to_string(p.scheduling) << ','
    << to_string(p.pipeline) << ',' << (p.pruning ? "on" : "off") << ','
    << (p.exact_rerank ? "on" : "off") << ',' << p.batch_size << ',' << p.workers << ','
    << p.k << ',' << r.n_probe << ',' << p.rerank_factor << ',' << r.queries;
  for (const auto& rec : r.recall) {
    o << ',';
    if (rec) o << *rec;
  }
  const double qps = r.wall > 0 ? static_cast<double>(r.queries) / r.wall : 0.0;
  o << ',' << qps << ',' << r.stats.probe_seconds << ',' << r.stats.coarse_seconds << ','
    << r.stats.topk_seconds << ',' << r.stats.rerank_seconds << ','
    << r.stats.total_seconds << ',' << r.wall << ',' << r.stats.idle_slots << ','
    << r.stats.prune_skips << ',' << r.stats.heap_insertions;
  return o.str();
}

std::string csv_of(const std::vector<Row>& rows) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : rows) out += format_row(r) + "\n";
  return out;
}

Row timed_run(const Engine& e, const FloatMatrix& queries, const SearchParams& p,
              std::vector<SearchResult>* results) {
  Row row;
  row.params = p;
  row.n_probe = resolve_n_probe(p, e.n_list());
  row.queries = queries.rows();
  const auto t0 = Clock::now();
  auto res = e.search(queries, p, &row.stats);
  row.wall = std::chrono::duration<double>(Clock::now() - t0).count();
  if (results) *results = std::move(res);
  return row;
}

// ---- ground truth ----

IdLists ground_truth(const Engine& e, const FloatMatrix& queries, const std::string& gt_path,
                     const std::string& cache_path, std::size_t depth, std::ostream& err) {
  if (!gt_path.empty()) {
    require_file("--gt", gt_path);
    auto gt = read_ivecs(gt_path, queries.rows());
    if (gt.size() != queries.rows()) {
      throw InvalidData("ground truth has " + std::to_string(gt.size()) + " rows for " +
                        std::to_string(queries.rows()) + " queries");
    }
    return gt;
  }
  depth = std::min<std::size_t>(depth, e.size());
  if (!cache_path.empty() && fs::exists(cache_path)) {
    auto gt = read_ivecs(cache_path);
    if (gt.size() == queries.rows() && !gt.empty() && gt.front().size() >= depth) {
      return gt;
    }
    err << "ground-truth cache " << cache_path << " does not fit; recomputing\n";
  }
  err << "computing exact ground truth (" << queries.rows() << " queries, depth " << depth
      << ")\n";
  auto gt = brute_force_knn(*e.base, queries, depth);
  if (!cache_path.empty()) write_ivecs(cache_path, gt);
  return gt;
}

std::string default_gt_cache(const SearchFlags& flags, std::size_t n) {
  // keyed by base size and query count so a rebuilt corpus is not confused
  return flags.index + ".gt-" + fs::path(flags.queries).stem().string() + "-" +
         std::to_string(n) + ".ivecs";
}

const std::size_t kRecallDepths[3] = {10, 100, 300};

// recall@10/100/300 for `p`; depths beyond the ground truth or the corpus
// are left empty. Each depth is its own search with k = depth.
void fill_recall(Row& row, const Engine& e, const FloatMatrix& queries, const IdLists& gt,
                 const std::vector<SearchResult>& main_results) {
  const std::size_t gt_depth = gt.empty() ? 0 : gt.front().size();
  for (int i = 0; i < 3; ++i) {
    const std::size_t r = kRecallDepths[i];
    if (r > gt_depth || r > e.size()) continue;
    if (r == row.params.k) {
      row.recall[i] = recall_at_k(main_results, gt, r);
      continue;
    }
    SearchParams p = row.params;
    p.k = r;
    row.recall[i] = recall_at_k(e.search(queries, p, nullptr), gt, r);
  }
}

// ---- commands ----

struct GenFlags {
  std::size_t n = 0, d = 0, clusters = 0, queries = 0, gt_k = 100;
  std::uint64_t seed = 0;
  float spread = 4.0f;
  std::string out, queries_out, gt_out;
};

int cmd_gen(const GenFlags& f, std::ostream& out) {
  GaussianMixture mix(f.d, f.clusters, f.seed, f.spread);
  const auto base = mix.sample(f.n, f.seed + 1);
  write_fvecs(f.out, base);
  out << "wrote " << f.n << " x " << f.d << " vectors to " << f.out << "\n";
  if (f.queries > 0) {
    if (f.queries_out.empty()) throw UsageError("--queries needs --queries-out");
    const auto q = mix.sample(f.queries, f.seed + 2);
    write_fvecs(f.queries_out, q);
    out << "wrote " << f.queries << " queries to " << f.queries_out << "\n";
    if (!f.gt_out.empty()) {
      write_ivecs(f.gt_out, brute_force_knn(base, q, f.gt_k));
      out << "wrote ground truth (depth " << std::min(f.gt_k, f.n) << ") to " << f.gt_out
          << "\n";
    }
  } else if (!f.gt_out.empty()) {
    throw UsageError("--gt-out needs --queries");
  }
  return kOk;
}

struct BuildFlags {
  std::string base, out, n_list = "auto";
  std::size_t block_size = 1024, shards = 1, shard_block_size = 0, limit = 0,
              kmeans_iter = 25;
  std::uint64_t seed = 0;
};

int cmd_build(const BuildFlags& f, std::ostream& out) {
  require_file("--base", f.base);
  const auto ds = load_dataset(f.base, f.limit);
  BuildConfig cfg;
  cfg.n_list = parse_auto("--nlist", f.n_list);
  cfg.block_size = f.block_size;
  cfg.seed = f.seed;
  cfg.kmeans_max_iter = f.kmeans_iter;

  nlohmann::json extra;
  extra["base"] = fs::absolute(f.base).string();
  extra["format"] = ds.format == VectorFormat::kBvecs ? "bvecs" : "fvecs";
  extra["limit"] = f.limit;
  extra["block_size"] = f.block_size;
  const fs::path out_path = f.out;
  const auto manifest = manifest_path_for(out_path);

  const auto t0 = Clock::now();
  if (f.shards == 1) {
    const auto index = build(ds.vectors, cfg);
    save(index, out_path);
    extra["S"] = 1;
    extra["seed"] = index.seed;
    extra["nList"] = index.n_list;
    extra["D"] = index.dim;
    extra["N"] = index.total_vectors;
    extra["shards"] = nlohmann::json::array({out_path.filename().string()});
    write_text_atomic(manifest, extra.dump(2) + "\n");
    const auto s = stats(index);
    out << "built index: N=" << index.total_vectors << " D=" << index.dim
        << " nList=" << index.n_list << " blocks=" << s.total_blocks
        << " code_bytes/vector=" << code_bytes(index.dim) << "\n";
  } else {
    const auto built = partition(ds.vectors, cfg, f.shards, f.shard_block_size);
    extra["shard_block_size"] = f.shard_block_size;
    save_sharded(built.index, manifest, extra.dump(), out_path.filename().string());
    const auto& first = built.index.shards.front();
    out << "built " << f.shards << " shards: N=" << built.index.total_vectors()
        << " D=" << first.dim << " nList=" << first.n_list
        << " max imbalance=" << max_shard_imbalance(built.index) << "\n";
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  out << "build time " << secs << " s; manifest " << manifest.string() << "\n";
  return kOk;
}

struct SearchCmdFlags {
  SearchFlags s;
  std::string out, timings;
};

int cmd_search(const SearchCmdFlags& f, std::ostream& out) {
  const auto engine = open_engine(f.s);
  const auto queries = load_queries(f.s, engine.index.shards.front().dim);
  const auto params = f.s.params();
  std::vector<SearchResult> results;
  const Row row = timed_run(engine, queries, params, &results);
  write_ivecs(f.out, to_ivecs_rows(results));
  if (!f.timings.empty()) write_text_atomic(f.timings, csv_of({row}));
  out << "searched " << row.queries << " queries (nProbe=" << row.n_probe
      << ", M=" << params.candidates() << ") in " << row.wall << " s\n";
  return kOk;
}

struct BenchFlags {
  SearchFlags s;
  std::string gt, gt_cache, out, n_probe_list = "auto", rerank_list = "10";
  bool no_recall = false;
};

int cmd_bench(const BenchFlags& f, std::ostream& out, std::ostream& err) {
  const auto engine = open_engine(f.s);
  const auto queries = load_queries(f.s, engine.index.shards.front().dim);
  const auto base_params = f.s.params();
  const auto probes = parse_list("--nprobe-list", f.n_probe_list);
  const auto factors = parse_list("--rerank-list", f.rerank_list);

  IdLists gt;
  if (!f.no_recall) {
    const std::size_t depth = std::max<std::size_t>(300, base_params.k);
    gt = ground_truth(engine, queries, f.gt,
                      f.gt_cache.empty() ? default_gt_cache(f.s, engine.size()) : f.gt_cache,
                      depth, err);
  }

  // warm-up, untimed
  (void)engine.search(queries, base_params, nullptr);

  out << kCsvHeader << "\n";
  std::vector<Row> rows;
  for (std::size_t factor : factors) {
    for (std::size_t n_probe : probes) {
      SearchParams p = base_params;
      p.n_probe = n_probe;
      p.rerank_factor = factor;
      std::vector<SearchResult> results;
      Row row = timed_run(engine, queries, p, &results);
      if (!f.no_recall) fill_recall(row, engine, queries, gt, results);
      out << format_row(row) << "\n";
      rows.push_back(std::move(row));
    }
  }
  if (!f.out.empty()) write_text_atomic(f.out, csv_of(rows));
  return kOk;
}

struct AblateFlags {
  SearchFlags s;
  std::string gt, out, ivecs_prefix;
  std::size_t repeat = 1;
};

struct Rung {
  const char* name;
  Kernel kernel;
  Scheduling scheduling;
  bool pruning;
  Pipeline pipeline;
};

constexpr Rung kLadder[] = {
    {"baseline", Kernel::kSelect, Scheduling::kQueryLevel, false, Pipeline::kNone},
    {"+block_schedule", Kernel::kSelect, Scheduling::kBlockLevel, false, Pipeline::kNone},
    {"+gather_kernel", Kernel::kGather, Scheduling::kBlockLevel, false, Pipeline::kNone},
    {"+pruning_stage2", Kernel::kGather, Scheduling::kBlockLevel, true, Pipeline::kStage2},
    {"+stage3", Kernel::kGather, Scheduling::kBlockLevel, true, Pipeline::kStage3},
};

int cmd_ablate(const AblateFlags& f, std::ostream& out, std::ostream& err) {
  const auto engine = open_engine(f.s);
  const auto queries = load_queries(f.s, engine.index.shards.front().dim);
  SearchParams base_params = f.s.params();

  std::optional<IdLists> gt;
  if (!f.gt.empty()) gt = ground_truth(engine, queries, f.gt, "", base_params.k, err);

  (void)engine.search(queries, base_params, nullptr);

  std::vector<SearchResult> reference;
  std::ostringstream csv;
  csv << "rung,name,kernel,schedule,pruning,pipeline,qps,relative_throughput,wall_s,"
         "idle_slots,prune_skips,recall@k,identical\n";
  double baseline_qps = 0.0;
  int rung_no = 0;
  for (const auto& rung : kLadder) {
    ++rung_no;
    SearchParams p = base_params;
    p.kernel = rung.kernel;
    p.scheduling = rung.scheduling;
    p.pruning = rung.pruning;
    p.pipeline = rung.pipeline;
    // best of `repeat` runs
    Row best;
    std::vector<SearchResult> results;
    for (std::size_t rep = 0; rep < std::max<std::size_t>(1, f.repeat); ++rep) {
      std::vector<SearchResult> res;
      Row row = timed_run(engine, queries, p, &res);
      if (rep == 0 || row.wall < best.wall) best = row;
      if (rep == 0) results = std::move(res);
    }
    bool same = true;
    if (rung_no == 1) {
      reference = results;
    } else {
      for (std::size_t q = 0; q < results.size(); ++q) {
        if (results[q].neighbors != reference[q].neighbors) {
          same = false;
          break;
        }
      }
    }
    if (!f.ivecs_prefix.empty()) {
      write_ivecs(f.ivecs_prefix + std::to_string(rung_no) + ".ivecs", to_ivecs_rows(results));
    }
    const double qps =
        best.wall > 0 ? static_cast<double>(queries.rows()) / best.wall : 0.0;
    if (rung_no == 1) baseline_qps = qps;
    csv << rung_no << ',' << rung.name << ',' << to_string(p.kernel) << ','
        << to_string(p.scheduling) << ',' << (p.pruning ? "on" : "off") << ','
        << to_string(p.pipeline) << ',' << qps << ','
        << (baseline_qps > 0 ? qps / baseline_qps : 0.0) << ',' << best.wall << ','
        << best.stats.idle_slots << ',' << best.stats.prune_skips << ',';
    if (gt) csv << recall_at_k(results, *gt, p.k);
    csv << ',' << (same ? "yes" : "no") << '\n';
    if (!same) {
      out << csv.str();
      throw AblationMismatch("rung " + std::to_string(rung_no) + " (" + rung.name +
                             ") returned different neighbors than the baseline");
    }
  }
  out << csv.str();
  if (!f.out.empty()) write_text_atomic(f.out, csv.str());
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"IVF index over 1-bit codes: build, search and benchmark", "bitivf"};
  app.require_subcommand(1);

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-synthetic", "Write a seeded Gaussian-mixture corpus");
  gen_cmd->add_option("--n", gen.n, "Base vectors")->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--d", gen.d, "Dimension")->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--clusters", gen.clusters)->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen.seed)->required();
  gen_cmd->add_option("--out", gen.out, "Base fvecs")->required();
  gen_cmd->add_option("--spread", gen.spread, "Stddev of cluster centres")
      ->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--queries", gen.queries, "Also draw this many queries");
  gen_cmd->add_option("--queries-out", gen.queries_out);
  gen_cmd->add_option("--gt-out", gen.gt_out, "Exact neighbors of the queries (ivecs)");
  gen_cmd->add_option("--gt-k", gen.gt_k, "Ground-truth depth")->check(CLI::PositiveNumber);

  BuildFlags bf;
  auto* build_cmd = app.add_subcommand("build", "Build an index (optionally sharded)");
  build_cmd->add_option("--base", bf.base, "Base vectors (fvecs/bvecs)")->required();
  build_cmd->add_option("--out", bf.out, "Index path")->required();
  build_cmd->add_option("--nlist", bf.n_list, "Cluster count or auto");
  build_cmd->add_option("--block-size", bf.block_size)->check(CLI::PositiveNumber);
  build_cmd->add_option("--seed", bf.seed);
  build_cmd->add_option("--shards", bf.shards)->check(CLI::PositiveNumber);
  build_cmd->add_option("--shard-block-size", bf.shard_block_size,
                        "Block size inside shards (0 keeps --block-size)");
  build_cmd->add_option("--limit", bf.limit, "Read at most this many base vectors");
  build_cmd->add_option("--kmeans-iter", bf.kmeans_iter)->check(CLI::PositiveNumber);

  SearchCmdFlags sf;
  auto* search_cmd = app.add_subcommand("search", "Search a query file");
  sf.s.add_to(*search_cmd, true);
  search_cmd->get_option("--k")->required();
  search_cmd->add_option("--out", sf.out, "Neighbor ids (ivecs)")->required();
  search_cmd->add_option("--timings", sf.timings, "Timing CSV");

  BenchFlags bench;
  auto* bench_cmd = app.add_subcommand("bench", "Sweep nProbe and rerank factor");
  bench.s.add_to(*bench_cmd, true);
  bench_cmd->add_option("--gt", bench.gt, "Ground truth (ivecs)");
  bench_cmd->add_option("--gt-cache", bench.gt_cache, "Where computed ground truth is cached");
  bench_cmd->add_option("--nprobe-list", bench.n_probe_list, "Comma-separated, 'auto' allowed");
  bench_cmd->add_option("--rerank-list", bench.rerank_list, "Comma-separated");
  bench_cmd->add_flag("--no-recall", bench.no_recall, "Skip recall columns");
  bench_cmd->add_option("--out", bench.out, "CSV path");

  AblateFlags ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run the five-rung optimisation ladder");
  ab.s.add_to(*ablate_cmd, false);
  ablate_cmd->add_option("--nprobe", ab.s.n_probe);
  ablate_cmd->add_option("--rerank-factor", ab.s.rerank_factor)->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--gt", ab.gt, "Ground truth (ivecs)");
  ablate_cmd->add_option("--repeat", ab.repeat, "Timed runs per rung (best is kept)")
      ->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--out", ab.out, "CSV path");
  ablate_cmd->add_option("--ivecs-prefix", ab.ivecs_prefix,
                         "Write each rung's neighbors to <prefix><rung>.ivecs");

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n" << app.help();
    return kUsageError;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen(gen, out);
    if (build_cmd->parsed()) return cmd_build(bf, out);
    if (search_cmd->parsed()) return cmd_search(sf, out);
    if (bench_cmd->parsed()) return cmd_bench(bench, out, err);
    if (ablate_cmd->parsed()) return cmd_ablate(ab, out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const InvalidArgument& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const AblationMismatch& e) {
    err << "ablation mismatch: " << e.what() << "\n";
    return kAblationMismatch;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}

}  // namespace bitivf::cli
