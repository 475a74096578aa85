use criterion::{black_box, criterion_group, criterion_main, Criterion, Throughput};

use bitfuzz_bench::{load_device, load_spec};
use bitfuzz_core::bitstream::{
    decode_header, encode_type1_header, CrcState, Opcode, RegisterAddress,
};
use bitfuzz_core::crypto::{
    block_checksum, derive_h, digest256, gf_mul, keystream_word, AesKey, GcmIv,
};
use bitfuzz_core::harness::{run_case, SimTarget, Target};
use bitfuzz_core::sim::EngineState;

fn bench_codec(c: &mut Criterion) {
    let mut group = c.benchmark_group("codec");
    group.bench_function("encode_type1_header", |b| {
        b.iter(|| encode_type1_header(black_box(Opcode::Write), black_box(4), black_box(1)))
    });
    group.bench_function("decode_header", |b| {
        b.iter(|| decode_header(black_box(0x3000_8001)))
    });
    let cmd = RegisterAddress::new(4).unwrap();
    group.bench_function("crc_feed", |b| {
        let mut crc = CrcState::new();
        b.iter(|| {
            crc.feed(cmd, black_box(0xDEAD_C0DE));
            crc.value()
        })
    });
    group.finish();
}

fn bench_crypto(c: &mut Criterion) {
    let key = AesKey([0x42; 32]);
    let iv = GcmIv([1, 2, 3, 4]);
    let h = derive_h(&key, &iv);
    let payload = [0xDEAD_C0DE; 7];
    let signed: Vec<u32> = (0..2466).collect();

    let mut group = c.benchmark_group("crypto");
    group.bench_function("keystream_word", |b| {
        b.iter(|| keystream_word(&key, &iv, black_box(1234)))
    });
    group.bench_function("gf_mul", |b| {
        b.iter(|| gf_mul(black_box(0xDEAD_C0DE), black_box(0x0BAD_CAFE)))
    });
    group.bench_function("block_checksum", |b| {
        b.iter(|| block_checksum(h, &key, &iv, black_box(7), &payload))
    });
    group.throughput(Throughput::Elements(signed.len() as u64));
    group.bench_function("digest256_rsa_block", |b| b.iter(|| digest256(&signed)));
    group.finish();
}

fn bench_campaign_path(c: &mut Criterion) {
    // Per-case cost of the two checked-in campaigns: render plus a full
    // reset/program/probe cycle on the simulator.
    let starbleed = load_spec("starbleed.json");
    let juststart = load_spec("juststart.json");
    let defaults = [0u32; 32];

    let mut group = c.benchmark_group("campaign");

    // The unmodified encrypted base decrypts end to end; overlay case 0 is
    // a mutation that dies at the first checksum boundary. Campaign cost
    // sits between the two.
    let clean_base = bitfuzz_core::bitstream::BitstreamImage::read_file(
        bitfuzz_bench::fixtures_dir().join("golden/starbleed_base.bit"),
    )
    .unwrap();
    let (_, mutated) = starbleed.render(0).unwrap();
    let mut engine = EngineState::new(&load_device("uplus_default.json")).unwrap();
    group.bench_function("sim_program_encrypted_clean_339w", |b| {
        b.iter(|| {
            engine.reset_jprogram().unwrap();
            engine.program(black_box(&clean_base)).unwrap()
        })
    });
    group.bench_function("sim_program_encrypted_checksum_abort", |b| {
        b.iter(|| {
            engine.reset_jprogram().unwrap();
            engine.program(black_box(&mutated)).unwrap()
        })
    });

    group.bench_function("render_starbleed_case", |b| {
        let mut case = 0u64;
        b.iter(|| {
            case = (case + 1) % 4096;
            starbleed.render(black_box(case)).unwrap()
        })
    });

    group.bench_function("render_juststart_case", |b| {
        let mut case = 0u64;
        b.iter(|| {
            case = (case + 1) % 32_768;
            juststart.render(black_box(case)).unwrap()
        })
    });

    let mut target = SimTarget::new(&load_device("uplus_default.json")).unwrap();
    group.bench_function("run_case_starbleed", |b| {
        let mut case = 0u64;
        b.iter(|| {
            case = (case + 1) % 4096;
            let (_, image) = starbleed.render(case).unwrap();
            run_case(
                &mut target as &mut dyn Target,
                &image,
                &defaults,
                &starbleed.settings,
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_codec, bench_crypto, bench_campaign_path);
criterion_main!(benches);
